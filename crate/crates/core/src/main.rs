use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use soundfield::dataset::{generate_dataset, load_field, DatasetConfig, DatasetManifest, Split};
use soundfield::eval::{
    arrangement_extremes, evaluate, export_field_csv, export_plane_csv, trial_arrangement, write_aggregate_csv,
    write_records_csv, Baseline, BaselineMethod, EvalConfig, EvalReport, Network, Reconstructor, AGGREGATE_FILE,
    RECORDS_FILE,
};
use soundfield::metrics::{field_metrics, write_metric_csv};
use soundfield::modal::Damping;
use soundfield::nn::{checkpoint, UNetConfig, UNetWeights};
use soundfield::preprocess::{MaskTensor, Observations};
use soundfield::training::{train, StageConfig, TrainConfig, BEST_CHECKPOINT, LOG_FILE};
use soundfield::{Error, Result};

pub const RUN_CONFIG_FILE: &str = "run_config.json";

/// Sound-field reconstruction from sparse microphone samples.
#[derive(Debug, Parser)]
#[command(name = "soundfield", version)]
struct Cli {
    /// Worker threads; 1 forces fully deterministic scheduling.
    #[arg(long, global = true, env = "SOUNDFIELD_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
enum Command {
    /// Simulate random rooms and write a dataset directory.
    GenerateDataset(GenerateArgs),
    /// Two-stage training on a dataset.
    Train(TrainArgs),
    /// Score a checkpoint over random microphone arrangements.
    Evaluate(EvaluateArgs),
    /// Score an interpolation baseline with the evaluation protocol.
    Baseline(BaselineArgs),
    /// Reconstruct one room and write field slices for plotting.
    Reconstruct(ReconstructArgs),
    /// Find the best and worst of several random arrangements in one room.
    Extremes(ExtremesArgs),
    /// Repeat a run from its run_config.json snapshot.
    #[serde(skip)]
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct GenerateArgs {
    /// Number of rooms to simulate.
    #[arg(long)]
    rooms: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Fraction of rooms assigned to the training split.
    #[arg(long, default_value_t = 0.75)]
    split_fraction: f64,
    /// Modes with resonance frequency below this are summed (Hz).
    #[arg(long, default_value_t = 400.0)]
    mode_cutoff: f64,
    /// Include modes with a vertical index.
    #[arg(long)]
    include_height_modes: bool,
    /// Damping term: "dimensional" or "as-printed".
    #[arg(long, default_value = "dimensional")]
    damping: Damping,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for checkpoints and the log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    epochs1: usize,
    #[arg(long, default_value_t = 50)]
    epochs2: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr1: f64,
    #[arg(long, default_value_t = 5e-5)]
    lr2: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Weight of the loss on unobserved cells.
    #[arg(long, default_value_t = 12.0)]
    loss_weight: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    nmic_min: usize,
    #[arg(long, default_value_t = 55)]
    nmic_max: usize,
    /// U-Net depth (encoder stages).
    #[arg(long, default_value_t = 4)]
    depth: usize,
    /// Channels of the first encoder stage.
    #[arg(long, default_value_t = 64)]
    base_filters: usize,
    /// Save a snapshot every N epochs (0 disables).
    #[arg(long, default_value_t = 0)]
    snapshot_every: usize,
    /// Run only the fine-tuning stage, starting from --from.
    #[arg(long, requires = "from")]
    stage2_only: bool,
    /// Initial weights.
    #[arg(long)]
    from: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
enum SplitArg {
    All,
    Train,
    Validation,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated microphone counts.
    #[arg(long, value_delimiter = ',', default_value = "5,15,35,55")]
    nmics: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    arrangements: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Which rooms of the dataset to use.
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    split: SplitArg,
    /// Explicit comma-separated room ids (overrides --split).
    #[arg(long, value_delimiter = ',')]
    rooms: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    eval: EvalArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct BaselineArgs {
    /// nearest or idw.
    #[arg(long)]
    method: BaselineMethod,
    #[command(flatten)]
    #[serde(flatten)]
    eval: EvalArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct ReconstructArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    room: usize,
    #[arg(long)]
    nmic: usize,
    /// Frequency bin to export.
    #[arg(long)]
    freq_index: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Which of the seeded arrangements to use.
    #[arg(long, default_value_t = 0)]
    arrangement: usize,
    /// Use an interpolation baseline instead of the network.
    #[arg(long)]
    method: Option<BaselineMethod>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct ExtremesArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    room: usize,
    #[arg(long)]
    nmic: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Args, Default)]
struct RerunArgs {
    /// Path to a run_config.json written by an earlier run.
    config: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Rerun(args) => {
            let text = fs::read_to_string(&args.config).map_err(|e| Error::io(&args.config, e))?;
            let value: serde_json::Value = serde_json::from_str(&text)?;
            let command: Command = serde_json::from_value(value["command"].clone())?;
            run(command)
        }
        Command::GenerateDataset(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => {
            let weights = checkpoint::load(&a.checkpoint)?;
            let (config, manifest, ids) = eval_setup(&a.eval)?;
            check_compatible(&weights, &manifest)?;
            let record = json!({ "command": Command::Evaluate(a.clone()), "effective": config });
            run_eval(&Network { weights: &weights }, &a.eval, &config, &manifest, &ids, record)
        }
        Command::Baseline(a) => {
            let (config, manifest, ids) = eval_setup(&a.eval)?;
            let record = json!({ "command": Command::Baseline(a.clone()), "effective": config });
            run_eval(&Baseline(a.method), &a.eval, &config, &manifest, &ids, record)
        }
        Command::Reconstruct(a) => cmd_reconstruct(&a),
        Command::Extremes(a) => cmd_extremes(&a),
    }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_run_config(dir: &Path, value: &serde_json::Value) -> Result<()> {
    let path = dir.join(RUN_CONFIG_FILE);
    let text = serde_json::to_string_pretty(value)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let mut config = DatasetConfig::new(a.rooms, a.seed);
    config.split_fraction = a.split_fraction;
    config.model.f_max = a.mode_cutoff;
    config.model.include_height = a.include_height_modes;
    config.model.damping = a.damping;
    let manifest = generate_dataset(&config, &a.out)?;
    write_run_config(
        &a.out,
        &json!({ "command": Command::GenerateDataset(a.clone()), "effective": config }),
    )?;
    println!(
        "wrote {} rooms to {} ({} train / {} validation, {} frequencies)",
        manifest.n_rooms,
        a.out.display(),
        manifest.n_train,
        manifest.n_validation,
        manifest.frequencies.len()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.dataset)?;
    let mut network = UNetConfig::with_depth(a.depth, a.base_filters);
    network.in_channels = manifest.frequencies.len();
    network.out_channels = manifest.frequencies.len();
    let config = TrainConfig {
        stage1: StageConfig {
            epochs: a.epochs1,
            learning_rate: a.lr1,
        },
        stage2: StageConfig {
            epochs: a.epochs2,
            learning_rate: a.lr2,
        },
        batch_size: a.batch_size,
        loss_weight_missing: a.loss_weight,
        seed: a.seed,
        n_mic_range: (a.nmic_min, a.nmic_max),
        snapshot_every: a.snapshot_every,
        network,
        checkpoint_dir: Some(a.out.clone()),
        stage2_only: a.stage2_only,
        ..TrainConfig::default()
    };
    let initial = match &a.from {
        Some(p) => Some(checkpoint::load(p)?),
        None => None,
    };
    create_out(&a.out)?;
    write_run_config(&a.out, &json!({ "command": Command::Train(a.clone()), "effective": config }))?;
    let outcome = train(&manifest, &config, initial)?;
    println!(
        "best validation loss {:.6} at stage {} epoch {}; wrote {} and {}",
        outcome.best_val_loss,
        outcome.best_stage,
        outcome.best_epoch,
        a.out.join(BEST_CHECKPOINT).display(),
        a.out.join(LOG_FILE).display()
    );
    Ok(())
}

fn check_compatible(weights: &UNetWeights<f32>, manifest: &DatasetManifest) -> Result<()> {
    if weights.config.in_channels != manifest.frequencies.len() || weights.config.spatial != manifest.grid.fine_n {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {} bins on a {}x{} grid, dataset has {} bins on {}x{}",
            weights.config.in_channels,
            weights.config.spatial,
            weights.config.spatial,
            manifest.frequencies.len(),
            manifest.grid.fine_n,
            manifest.grid.fine_n
        )));
    }
    Ok(())
}

fn eval_setup(a: &EvalArgs) -> Result<(EvalConfig, DatasetManifest, Vec<usize>)> {
    let manifest = DatasetManifest::load(&a.dataset)?;
    let config = EvalConfig {
        n_mic_list: a.nmics.clone(),
        arrangements_per_room: a.arrangements,
        seed: a.seed,
        batch_size: a.batch_size,
        ..EvalConfig::default()
    };
    config.validate()?;
    let ids = if !a.rooms.is_empty() {
        for &id in &a.rooms {
            manifest.record(id)?;
        }
        a.rooms.clone()
    } else {
        match a.split {
            SplitArg::All => manifest.all_ids(),
            SplitArg::Train => manifest.ids(Split::Train),
            SplitArg::Validation => manifest.ids(Split::Validation),
        }
    };
    Ok((config, manifest, ids))
}

fn run_eval(
    method: &dyn Reconstructor,
    a: &EvalArgs,
    config: &EvalConfig,
    manifest: &DatasetManifest,
    ids: &[usize],
    record: serde_json::Value,
) -> Result<()> {
    create_out(&a.out)?;
    write_run_config(&a.out, &record)?;
    let report = evaluate(method, config, manifest, ids)?;
    write_records_csv(&a.out.join(RECORDS_FILE), &report)?;
    write_aggregate_csv(&a.out.join(AGGREGATE_FILE), &report.aggregate)?;
    print_summary(method.name(), &report, config);
    Ok(())
}

fn print_summary(name: &str, report: &EvalReport, config: &EvalConfig) {
    println!(
        "{name}: {} trials scored, {} skipped",
        report.records.len(),
        report.failures
    );
    for &n in &config.n_mic_list {
        let nmse = report.band_mean_nmse_db(n, f64::NEG_INFINITY, f64::INFINITY);
        let ssim = report.band_mean_mssim(n, f64::NEG_INFINITY, f64::INFINITY);
        println!(
            "  n_mic {n:>2}: mean NMSE {} dB, mean MSSIM {}",
            nmse.map_or("n/a".into(), |v| format!("{v:.2}")),
            ssim.map_or("n/a".into(), |v| format!("{v:.3}"))
        );
    }
}

fn cmd_reconstruct(a: &ReconstructArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.dataset)?;
    let truth = load_field(&manifest, a.room)?;
    if a.freq_index >= truth.n_freq() {
        return Err(Error::InvalidArgument(format!(
            "frequency index {} out of range 0..{}",
            a.freq_index,
            truth.n_freq()
        )));
    }
    let arrangement = trial_arrangement(a.seed, a.room, a.nmic, a.arrangement)?;
    let trial = soundfield::eval::Trial {
        room_id: a.room,
        arrangement_id: a.arrangement,
        truth: &truth,
        observed: Observations::from_field(&truth, &arrangement),
    };
    let estimate = match a.method {
        Some(m) => Baseline(m).reconstruct(std::slice::from_ref(&trial)),
        None => {
            let weights = checkpoint::load(&a.checkpoint)?;
            check_compatible(&weights, &manifest)?;
            Network { weights: &weights }.reconstruct(std::slice::from_ref(&trial))
        }
    }
    .pop()
    .expect("one result per trial")?;
    create_out(&a.out)?;
    write_run_config(&a.out, &json!({ "command": Command::Reconstruct(a.clone()) }))?;
    export_field_csv(&truth, a.freq_index, &a.out.join("truth.csv"))?;
    export_field_csv(&estimate, a.freq_index, &a.out.join("prediction.csv"))?;
    let mask = MaskTensor::from_arrangement(&arrangement, truth.n_freq());
    let plane: Vec<f32> = mask.plane().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    export_plane_csv(&plane, &truth, &a.out.join("input_mask.csv"))?;
    let metrics = field_metrics(&truth, &estimate)?;
    write_metric_csv(&a.out.join("metrics.csv"), &manifest.frequencies, &metrics)?;
    println!(
        "room {} with {} microphones at {:.2} Hz: NMSE {} dB, MSSIM {:.3}",
        a.room,
        a.nmic,
        manifest.frequencies[a.freq_index],
        metrics.nmse.db[a.freq_index].map_or("n/a".into(), |v| format!("{v:.2}")),
        metrics.mssim[a.freq_index]
    );
    Ok(())
}

fn cmd_extremes(a: &ExtremesArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.dataset)?;
    let weights = checkpoint::load(&a.checkpoint)?;
    check_compatible(&weights, &manifest)?;
    let truth = load_field(&manifest, a.room)?;
    let (best, worst) = arrangement_extremes(&Network { weights: &weights }, a.room, &truth, a.nmic, a.trials, a.seed)?;
    create_out(&a.out)?;
    write_run_config(&a.out, &json!({ "command": Command::Extremes(a.clone()) }))?;
    for (label, r) in [("best", &best), ("worst", &worst)] {
        let mut w = csv::Writer::from_path(a.out.join(format!("{label}_arrangement.csv")))?;
        w.write_record(["i", "j"])?;
        for (i, j) in r.arrangement.points() {
            w.write_record([i.to_string(), j.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(a.out.join(format!("{label}_arrangement.csv")), e))?;
        let m = soundfield::metrics::FieldMetrics {
            nmse: soundfield::metrics::NmseCurve {
                linear: r.record.nmse_linear.clone(),
                db: r.record.nmse_db.clone(),
            },
            mssim: r.record.mssim.clone(),
        };
        write_metric_csv(&a.out.join(format!("{label}_metrics.csv")), &manifest.frequencies, &m)?;
        println!(
            "{label}: arrangement {} with band NMSE {:.2} dB",
            r.record.arrangement_id, r.band_nmse_db
        );
    }
    Ok(())
}
