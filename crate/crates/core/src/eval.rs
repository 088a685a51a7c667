//! Evaluation over random microphone arrangements, interpolation baselines,
//! best/worst arrangement search and field-slice export.

use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_field, DatasetManifest};
use crate::error::{Error, Result};
use crate::grid::{FieldTensor, GridSpec, UPSAMPLE};
use crate::metrics::{field_metrics, rescale, to_db};
use crate::nn::{predict, UNetWeights};
use crate::preprocess::{prepare, sample_arrangement, MicArrangement, NetworkInput, Observations};
use crate::rng::keyed;
use crate::training::scaled_ground_truth;

pub const RECORDS_FILE: &str = "eval_records.csv";
pub const AGGREGATE_FILE: &str = "eval_aggregate.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_mic_list: Vec<usize>,
    pub arrangements_per_room: usize,
    pub seed: u64,
    /// Two-sided normal quantile of the confidence interval (1.96 for 95%).
    pub z: f64,
    /// Trials per network forward pass.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_mic_list: vec![5, 15, 35, 55],
            arrangements_per_room: 200,
            seed: 0,
            z: 1.96,
            batch_size: 32,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mic_list.is_empty() {
            return Err(Error::InvalidArgument("microphone count list is empty".into()));
        }
        let max = crate::grid::COARSE_N * crate::grid::COARSE_N;
        if let Some(&bad) = self.n_mic_list.iter().find(|&&n| n == 0 || n > max) {
            return Err(Error::InvalidArgument(format!("microphone count {bad} outside 1..={max}")));
        }
        if self.arrangements_per_room == 0 {
            return Err(Error::InvalidArgument("need at least one arrangement per room".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Metrics of one reconstruction, one entry per frequency bin.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub room_id: usize,
    pub arrangement_id: usize,
    pub n_mic: usize,
    pub nmse_linear: Vec<Option<f64>>,
    pub nmse_db: Vec<Option<f64>>,
    pub mssim: Vec<f64>,
}

impl EvalRecord {
    /// Mean of the linear NMSE over defined bins, in dB.
    pub fn band_nmse_db(&self) -> Option<f64> {
        let defined: Vec<f64> = self.nmse_linear.iter().flatten().copied().collect();
        (!defined.is_empty()).then(|| to_db(defined.iter().sum::<f64>() / defined.len() as f64))
    }
}

/// One reconstruction problem: a true field and the samples taken from it.
#[derive(Debug, Clone)]
pub struct Trial<'a> {
    pub room_id: usize,
    pub arrangement_id: usize,
    pub truth: &'a FieldTensor,
    pub observed: Observations,
}

/// Anything that turns microphone samples into a full field estimate.
pub trait Reconstructor: Sync {
    fn name(&self) -> &str;

    /// One result per trial, in order.
    fn reconstruct(&self, trials: &[Trial<'_>]) -> Vec<Result<FieldTensor>>;
}

/// The trained network followed by the per-bin regression.
pub struct Network<'w> {
    pub weights: &'w UNetWeights<f32>,
}

impl Reconstructor for Network<'_> {
    fn name(&self) -> &str {
        "network"
    }

    fn reconstruct(&self, trials: &[Trial<'_>]) -> Vec<Result<FieldTensor>> {
        let inputs: Vec<Result<NetworkInput>> = trials.iter().map(|t| prepare(&t.observed)).collect();
        let ready: Vec<&NetworkInput> = inputs.iter().filter_map(|r| r.as_ref().ok()).collect();
        let mut preds = if ready.is_empty() {
            Ok(Vec::new())
        } else {
            predict(self.weights, &ready)
        };
        let mut next = 0;
        trials
            .iter()
            .zip(inputs)
            .map(|(t, inp)| {
                inp?;
                let pred = match &mut preds {
                    Ok(p) => std::mem::take(&mut p[next]),
                    Err(e) => return Err(Error::InvalidArgument(format!("network inference failed: {e}"))),
                };
                next += 1;
                Ok(rescale(&pred, &t.observed, t.truth)?.0)
            })
            .collect()
    }
}

/// Harness self-test: feeds the scaled ground truth through the same
/// regression as the network output.
pub struct Oracle;

impl Reconstructor for Oracle {
    fn name(&self) -> &str {
        "oracle"
    }

    fn reconstruct(&self, trials: &[Trial<'_>]) -> Vec<Result<FieldTensor>> {
        trials
            .iter()
            .map(|t| Ok(rescale(&scaled_ground_truth(t.truth)?, &t.observed, t.truth)?.0))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    /// Value of the nearest microphone; ties go to the smallest `(i, j)`.
    Nearest,
    /// Inverse-distance weighting with power 2.
    Idw,
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "idw" | "bilinear" => Ok(Self::Idw),
            other => Err(Error::InvalidArgument(format!(
                "unknown baseline method {other:?} (expected nearest or idw)"
            ))),
        }
    }
}

impl std::fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Nearest => "nearest",
            Self::Idw => "idw",
        })
    }
}

fn squared_distance(fine: (usize, usize), mic: (usize, usize)) -> f64 {
    let dx = fine.0 as f64 - (mic.0 * UPSAMPLE) as f64;
    let dy = fine.1 as f64 - (mic.1 * UPSAMPLE) as f64;
    dx * dx + dy * dy
}

/// Index into `arrangement.points()` of the microphone nearest to fine point `(x, y)`.
pub fn nearest_mic(arrangement: &MicArrangement, fine: (usize, usize)) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (m, &p) in arrangement.points().iter().enumerate() {
        let d = squared_distance(fine, p);
        if d < best.0 {
            best = (d, m);
        }
    }
    best.1
}

/// Inverse-squared-distance weights of every microphone at fine point `(x, y)`.
/// On a microphone the weight is 1 there and 0 elsewhere.
pub fn idw_weights(arrangement: &MicArrangement, fine: (usize, usize)) -> Vec<f64> {
    let d: Vec<f64> = arrangement.points().iter().map(|&p| squared_distance(fine, p)).collect();
    if let Some(hit) = d.iter().position(|&v| v == 0.0) {
        let mut w = vec![0.0; d.len()];
        w[hit] = 1.0;
        return w;
    }
    let inv: Vec<f64> = d.iter().map(|v| 1.0 / v).collect();
    let total: f64 = inv.iter().sum();
    inv.into_iter().map(|v| v / total).collect()
}

/// Interpolates the observations onto the fine grid of `template`, per bin.
pub fn baseline_reconstruct(method: BaselineMethod, observed: &Observations, template: &FieldTensor) -> FieldTensor {
    let n = template.n();
    let arr = &observed.arrangement;
    let mut out = FieldTensor::zeros(n, observed.n_freq, template.room);
    for j in 0..n {
        for i in 0..n {
            match method {
                BaselineMethod::Nearest => {
                    let m = nearest_mic(arr, (i, j));
                    for k in 0..observed.n_freq {
                        out.set(j, i, k, observed.at(m, k) as f32);
                    }
                }
                BaselineMethod::Idw => {
                    let w = idw_weights(arr, (i, j));
                    for k in 0..observed.n_freq {
                        let v: f64 = w.iter().enumerate().map(|(m, w)| w * observed.at(m, k)).sum();
                        out.set(j, i, k, v as f32);
                    }
                }
            }
        }
    }
    out
}

pub struct Baseline(pub BaselineMethod);

impl Reconstructor for Baseline {
    fn name(&self) -> &str {
        match self.0 {
            BaselineMethod::Nearest => "nearest",
            BaselineMethod::Idw => "idw",
        }
    }

    fn reconstruct(&self, trials: &[Trial<'_>]) -> Vec<Result<FieldTensor>> {
        trials
            .iter()
            .map(|t| Ok(baseline_reconstruct(self.0, &t.observed, t.truth)))
            .collect()
    }
}

/// Mean and confidence interval per `(n_mic, frequency)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub n_mic: usize,
    pub frequency_hz: f64,
    pub mean_nmse_db: f64,
    pub nmse_ci_lo: f64,
    pub nmse_ci_hi: f64,
    pub mean_mssim: f64,
    pub mssim_ci_lo: f64,
    pub mssim_ci_hi: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub aggregate: Vec<AggregateRow>,
    pub frequencies: Vec<f64>,
    pub failures: usize,
}

impl EvalReport {
    /// Aggregate mean NMSE (dB) for `n_mic`, averaged over bins with
    /// frequency in `[lo, hi]`.
    pub fn band_mean_nmse_db(&self, n_mic: usize, lo: f64, hi: f64) -> Option<f64> {
        band_mean(&self.aggregate, n_mic, lo, hi, |r| r.mean_nmse_db)
    }

    pub fn band_mean_mssim(&self, n_mic: usize, lo: f64, hi: f64) -> Option<f64> {
        band_mean(&self.aggregate, n_mic, lo, hi, |r| r.mean_mssim)
    }
}

fn band_mean(rows: &[AggregateRow], n_mic: usize, lo: f64, hi: f64, f: impl Fn(&AggregateRow) -> f64) -> Option<f64> {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.n_mic == n_mic && r.frequency_hz >= lo && r.frequency_hz <= hi)
        .map(f)
        .filter(|v| v.is_finite())
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Mean and `mean ± z·s/√n` with the sample standard deviation; NaN when empty.
pub fn mean_ci(values: &[f64], z: f64) -> (f64, f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, mean, mean);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let half = z * (var / n as f64).sqrt();
    (mean, mean - half, mean + half)
}

pub fn aggregate(records: &[EvalRecord], frequencies: &[f64], n_mic_list: &[usize], z: f64) -> Vec<AggregateRow> {
    let mut rows = Vec::with_capacity(n_mic_list.len() * frequencies.len());
    for &n_mic in n_mic_list {
        let group: Vec<&EvalRecord> = records.iter().filter(|r| r.n_mic == n_mic).collect();
        for (k, &f) in frequencies.iter().enumerate() {
            let nmse: Vec<f64> = group.iter().filter_map(|r| r.nmse_db[k]).collect();
            let ssim: Vec<f64> = group.iter().map(|r| r.mssim[k]).collect();
            let (mean_nmse_db, nmse_ci_lo, nmse_ci_hi) = mean_ci(&nmse, z);
            let (mean_mssim, mssim_ci_lo, mssim_ci_hi) = mean_ci(&ssim, z);
            rows.push(AggregateRow {
                n_mic,
                frequency_hz: f,
                mean_nmse_db,
                nmse_ci_lo,
                nmse_ci_hi,
                mean_mssim,
                mssim_ci_lo,
                mssim_ci_hi,
            });
        }
    }
    rows
}

/// The arrangement drawn for one trial; depends only on the seed and the
/// `(room, n_mic, arrangement)` triple.
pub fn trial_arrangement(seed: u64, room_id: usize, n_mic: usize, arrangement_id: usize) -> Result<MicArrangement> {
    let mut rng = keyed(seed, &[room_id as u64, n_mic as u64, arrangement_id as u64]);
    sample_arrangement(&mut rng, n_mic)
}

fn score(trial: &Trial<'_>, n_mic: usize, estimate: Result<FieldTensor>) -> Result<EvalRecord> {
    let m = field_metrics(trial.truth, &estimate?)?;
    Ok(EvalRecord {
        room_id: trial.room_id,
        arrangement_id: trial.arrangement_id,
        n_mic,
        nmse_linear: m.nmse.linear,
        nmse_db: m.nmse.db,
        mssim: m.mssim,
    })
}

/// Runs every `(room, n_mic, arrangement)` trial through `method` and the
/// common metric pipeline. Failed trials are logged and skipped.
pub fn evaluate_fields(
    method: &dyn Reconstructor,
    config: &EvalConfig,
    rooms: &[(usize, FieldTensor)],
    frequencies: &[f64],
) -> Result<EvalReport> {
    config.validate()?;
    let mut jobs = Vec::new();
    for (room_id, truth) in rooms {
        if truth.n_freq() != frequencies.len() {
            return Err(Error::Shape(format!(
                "room {room_id} has {} bins, expected {}",
                truth.n_freq(),
                frequencies.len()
            )));
        }
        for &n_mic in &config.n_mic_list {
            for a in 0..config.arrangements_per_room {
                jobs.push((*room_id, truth, n_mic, a));
            }
        }
    }
    let results: Vec<Vec<Result<EvalRecord>>> = jobs
        .par_chunks(config.batch_size)
        .map(|chunk| {
            let mut trials = Vec::with_capacity(chunk.len());
            let mut early = Vec::new();
            for &(room_id, truth, n_mic, a) in chunk {
                match trial_arrangement(config.seed, room_id, n_mic, a) {
                    Ok(arr) => trials.push((
                        n_mic,
                        Trial {
                            room_id,
                            arrangement_id: a,
                            truth,
                            observed: Observations::from_field(truth, &arr),
                        },
                    )),
                    Err(e) => early.push(Err(e)),
                }
            }
            let plain: Vec<Trial<'_>> = trials.iter().map(|(_, t)| t.clone()).collect();
            let estimates = method.reconstruct(&plain);
            early
                .into_iter()
                .chain(
                    trials
                        .iter()
                        .zip(estimates)
                        .map(|((n_mic, t), est)| score(t, *n_mic, est)),
                )
                .collect()
        })
        .collect();
    let mut records = Vec::with_capacity(jobs.len());
    let mut failures = 0;
    for r in results.into_iter().flatten() {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                failures += 1;
                log::warn!("{} trial skipped: {e}", method.name());
            }
        }
    }
    let aggregate = aggregate(&records, frequencies, &config.n_mic_list, config.z);
    Ok(EvalReport {
        records,
        aggregate,
        frequencies: frequencies.to_vec(),
        failures,
    })
}

/// [`evaluate_fields`] on rooms loaded from a dataset.
pub fn evaluate(
    method: &dyn Reconstructor,
    config: &EvalConfig,
    dataset: &DatasetManifest,
    room_ids: &[usize],
) -> Result<EvalReport> {
    if room_ids.is_empty() {
        return Err(Error::InvalidArgument("no rooms to evaluate".into()));
    }
    let rooms = room_ids
        .iter()
        .map(|&id| Ok((id, load_field(dataset, id)?)))
        .collect::<Result<Vec<_>>>()?;
    evaluate_fields(method, config, &rooms, &dataset.frequencies)
}

/// Writes `room_id,arrangement_id,n_mic,frequency_hz,nmse_db,mssim`, one row
/// per record and bin.
pub fn write_records_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["room_id", "arrangement_id", "n_mic", "frequency_hz", "nmse_db", "mssim"])?;
    for r in &report.records {
        for (k, f) in report.frequencies.iter().enumerate() {
            w.write_record([
                r.room_id.to_string(),
                r.arrangement_id.to_string(),
                r.n_mic.to_string(),
                f.to_string(),
                r.nmse_db[k].map(|v| v.to_string()).unwrap_or_default(),
                r.mssim[k].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_aggregate_csv(path: &Path) -> Result<Vec<AggregateRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// A ranked trial together with the arrangement that produced it.
#[derive(Debug, Clone)]
pub struct RankedTrial {
    pub record: EvalRecord,
    pub arrangement: MicArrangement,
    pub band_nmse_db: f64,
}

/// Evaluates `n_trials` random arrangements of `n_mic` microphones in one room
/// and returns the lowest and highest band-averaged NMSE.
pub fn arrangement_extremes(
    method: &dyn Reconstructor,
    room_id: usize,
    truth: &FieldTensor,
    n_mic: usize,
    n_trials: usize,
    seed: u64,
) -> Result<(RankedTrial, RankedTrial)> {
    if n_trials < 2 {
        return Err(Error::InvalidArgument(format!(
            "best/worst search needs at least 2 trials, got {n_trials}"
        )));
    }
    let mut trials = Vec::with_capacity(n_trials);
    let mut arrangements = Vec::with_capacity(n_trials);
    for a in 0..n_trials {
        let arr = trial_arrangement(seed, room_id, n_mic, a)?;
        trials.push(Trial {
            room_id,
            arrangement_id: a,
            truth,
            observed: Observations::from_field(truth, &arr),
        });
        arrangements.push(arr);
    }
    let estimates = method.reconstruct(&trials);
    let mut ranked = Vec::with_capacity(n_trials);
    for ((t, est), arr) in trials.iter().zip(estimates).zip(arrangements) {
        let record = match score(t, n_mic, est) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("{} trial skipped: {e}", method.name());
                continue;
            }
        };
        let Some(band) = record.band_nmse_db() else { continue };
        ranked.push(RankedTrial {
            record,
            arrangement: arr,
            band_nmse_db: band,
        });
    }
    if ranked.is_empty() {
        return Err(Error::InvalidArgument("no trial produced a defined NMSE".into()));
    }
    let linear = |r: &RankedTrial| {
        let d: Vec<f64> = r.record.nmse_linear.iter().flatten().copied().collect();
        d.iter().sum::<f64>() / d.len() as f64
    };
    let mut best = 0;
    let mut worst = 0;
    for i in 1..ranked.len() {
        if linear(&ranked[i]) < linear(&ranked[best]) {
            best = i;
        }
        if linear(&ranked[i]) > linear(&ranked[worst]) {
            worst = i;
        }
    }
    Ok((ranked[best].clone(), ranked[worst].clone()))
}

/// Writes slice `k` as a grid with x positions (m) in the header row and y
/// positions (m) in the first column.
pub fn export_field_csv(field: &FieldTensor, k: usize, path: &Path) -> Result<()> {
    if k >= field.n_freq() {
        return Err(Error::InvalidArgument(format!(
            "frequency index {k} out of range 0..{}",
            field.n_freq()
        )));
    }
    export_plane_csv(field.slice(k), field, path)
}

/// Like [`export_field_csv`] for any `n x n` row-major plane over the room of `field`.
pub fn export_plane_csv(plane: &[f32], field: &FieldTensor, path: &Path) -> Result<()> {
    let n = field.n();
    if plane.len() != n * n {
        return Err(Error::Shape(format!("plane has {} values, expected {}", plane.len(), n * n)));
    }
    let grid = GridSpec {
        fine_n: n,
        ..GridSpec::default()
    };
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["y\\x".to_string()];
    header.extend((0..n).map(|i| grid.x_position(&field.room, i).to_string()));
    w.write_record(&header)?;
    for j in 0..n {
        let mut row = vec![grid.y_position(&field.room, j).to_string()];
        row.extend(plane[j * n..(j + 1) * n].iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A slice read back from [`export_field_csv`].
#[derive(Debug, Clone, PartialEq)]
pub struct SliceCsv {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Row-major, `y.len() x x.len()`.
    pub values: Vec<f32>,
}

pub fn read_field_csv(path: &Path) -> Result<SliceCsv> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows = r.records();
    let header = rows.next().ok_or_else(|| corrupt("empty file".into()))??;
    let x = header
        .iter()
        .skip(1)
        .map(|s| s.parse::<f64>().map_err(|e| corrupt(format!("bad x position {s:?}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let (mut y, mut values) = (Vec::new(), Vec::new());
    for row in rows {
        let row = row?;
        if row.len() != x.len() + 1 {
            return Err(corrupt(format!("row has {} cells, expected {}", row.len(), x.len() + 1)));
        }
        let mut cells = row.iter();
        let first = cells.next().unwrap_or_default();
        y.push(first.parse::<f64>().map_err(|e| corrupt(format!("bad y position {first:?}: {e}")))?);
        for s in cells {
            values.push(s.parse::<f32>().map_err(|e| corrupt(format!("bad value {s:?}: {e}")))?);
        }
    }
    Ok(SliceCsv { x, y, values })
}
