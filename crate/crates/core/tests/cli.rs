use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use soundfield::dataset::DatasetManifest;
use soundfield::training::read_log;

fn soundfield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_soundfield"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = soundfield(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn same_files(a: &Path, b: &Path) {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        if name == "run_config.json" {
            continue;
        }
        let (x, y) = (fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
        assert!(x == y, "{name:?} differs");
    }
}

#[test]
fn generate_dataset_splits_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["generate-dataset", "--rooms", "200", "--seed", "7", "--out", s(&a)]);
    ok(&["--threads", "1", "generate-dataset", "--rooms", "200", "--seed", "7", "--out", s(&b)]);
    let manifest = DatasetManifest::load(&a).unwrap();
    assert_eq!((manifest.n_train, manifest.n_validation), (150, 50));
    same_files(&a, &b);
    assert!(a.join("run_config.json").exists());
}

#[test]
fn usage_and_runtime_errors() {
    let out = soundfield(&["generate-dataset", "--rooms", "4"]);
    assert_eq!(out.status.code(), Some(2));
    let out = soundfield(&["--threads", "0", "generate-dataset", "--rooms", "4", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = soundfield(&[
        "evaluate",
        "--dataset",
        s(dir.path()),
        "--checkpoint",
        s(&dir.path().join("missing.ckpt")),
        "--out",
        s(&dir.path().join("ev")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn train_evaluate_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let run = root.join("run");
    ok(&["generate-dataset", "--rooms", "12", "--seed", "3", "--out", s(&data)]);
    let toy = ["--depth", "2", "--base-filters", "4", "--batch-size", "4"];

    let mut args = vec!["train", "--dataset", s(&data), "--out", s(&run), "--epochs1", "5", "--epochs2", "5"];
    args.extend(toy);
    ok(&args);
    let log = read_log(&run.join("log.csv")).unwrap();
    assert_eq!(log.len(), 10);
    assert_eq!(log.iter().filter(|r| r.stage == 1).count(), 5);
    let ckpt = run.join("best.ckpt");
    assert!(ckpt.exists() && run.join("run_config.json").exists());

    let tuned = root.join("tuned");
    let mut args = vec![
        "train", "--dataset", s(&data), "--out", s(&tuned), "--stage2-only", "--from", s(&ckpt), "--epochs2", "2",
    ];
    args.extend(toy);
    ok(&args);
    let log = read_log(&tuned.join("log.csv")).unwrap();
    assert_eq!(log.len(), 2);
    assert!(log.iter().all(|r| r.stage == 2));

    let ev = root.join("ev");
    ok(&["evaluate", "--dataset", s(&data), "--checkpoint", s(&ckpt), "--out", s(&ev), "--arrangements", "2"]);
    let agg = fs::read_to_string(ev.join("eval_aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 1 + 160);
    let header = agg.lines().next().unwrap().to_string();

    let base = root.join("base");
    ok(&["baseline", "--dataset", s(&data), "--method", "idw", "--out", s(&base), "--arrangements", "2"]);
    let base_agg = fs::read_to_string(base.join("eval_aggregate.csv")).unwrap();
    assert_eq!(base_agg.lines().next().unwrap(), header);
    assert_eq!(base_agg.lines().count(), 1 + 160);

    let rec = root.join("rec");
    ok(&[
        "reconstruct", "--dataset", s(&data), "--checkpoint", s(&ckpt), "--out", s(&rec), "--room", "0", "--nmic", "15",
        "--freq-index", "10",
    ]);
    for name in ["truth.csv", "prediction.csv", "input_mask.csv", "metrics.csv"] {
        assert!(rec.join(name).exists(), "{name} missing");
    }
    assert_eq!(fs::read_to_string(rec.join("metrics.csv")).unwrap().lines().count(), 41);

    let before = fs::read(ev.join("eval_aggregate.csv")).unwrap();
    fs::remove_file(ev.join("eval_aggregate.csv")).unwrap();
    ok(&["rerun", s(&ev.join("run_config.json"))]);
    assert_eq!(fs::read(ev.join("eval_aggregate.csv")).unwrap(), before);
}
