//! Two-stage training of the partial-convolution U-Net with the masked,
//! weighted L1 loss against the min-max scaled ground truth.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_fields, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::grid::FieldTensor;
use crate::nn::{self, backward, batch_inputs, forward, LayerId, Mode, Scalar, Tensor, UNetConfig, UNetWeights};
use crate::preprocess::{prepare, sample_arrangement, NetworkInput, Observations, DEGENERATE_SCALED_VALUE};
use crate::rng::{keyed, Rng};

/// Value of a constant ground truth after scaling.
pub const DEGENERATE_TARGET: f64 = DEGENERATE_SCALED_VALUE;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LOG_FILE: &str = "log.csv";

const TAG_INIT: u64 = 0x696e_6974;
const TAG_ORDER: u64 = 0x6f72_6465;
const TAG_TRAIN: u64 = 0x7472_6169;
const TAG_VALID: u64 = 0x7661_6c69;

/// Min-max scaling of a whole field with a single minimum and maximum over all
/// positions and frequencies. A constant field maps to 0.5.
pub fn scaled_ground_truth(field: &FieldTensor) -> Result<Vec<f64>> {
    let values = field.values();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ground-truth field".into()));
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v as f64), hi.max(v as f64))
    });
    if !(hi > lo) {
        return Ok(vec![DEGENERATE_TARGET; values.len()]);
    }
    let span = hi - lo;
    Ok(values.iter().map(|&v| (v as f64 - lo) / span).collect())
}

fn check_loss_shapes<T>(pred: &[T], target: &[T], mask: &[T]) -> Result<()> {
    if pred.len() != target.len() || pred.len() != mask.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "loss inputs have lengths {}, {}, {}",
            pred.len(),
            target.len(),
            mask.len()
        )));
    }
    Ok(())
}

/// `sum(|M (p - t)|) / N + w * sum(|(1 - M)(p - t)|) / N` for one sample, where
/// `N` is the full tensor size and `mask` holds 0/1 entries.
pub fn loss<T: Scalar>(pred: &[T], target: &[T], mask: &[T], weight_missing: f64) -> Result<f64> {
    check_loss_shapes(pred, target, mask)?;
    let (mut observed, mut missing) = (0.0, 0.0);
    for ((p, t), m) in pred.iter().zip(target).zip(mask) {
        let d = (p.f64() - t.f64()).abs();
        let m = m.f64();
        observed += m * d;
        missing += (1.0 - m) * d;
    }
    let n = pred.len() as f64;
    Ok(observed / n + weight_missing * missing / n)
}

/// Derivative of [`loss`] with respect to `pred`, scaled by `scale`. At `p == t`
/// the subgradient 0 is used.
pub fn loss_gradient<T: Scalar>(
    pred: &[T],
    target: &[T],
    mask: &[T],
    weight_missing: f64,
    scale: f64,
) -> Result<Vec<T>> {
    check_loss_shapes(pred, target, mask)?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target)
        .zip(mask)
        .map(|((p, t), m)| {
            let d = p.f64() - t.f64();
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            let m = m.f64();
            T::of(sign * (m + weight_missing * (1.0 - m)) * scale / n)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub epochs: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Batch norm active everywhere.
    pub stage1: StageConfig,
    /// Encoder batch norm frozen to its running statistics.
    pub stage2: StageConfig,
    pub batch_size: usize,
    pub loss_weight_missing: f64,
    pub seed: u64,
    /// Inclusive range of microphone counts drawn per example.
    pub n_mic_range: (usize, usize),
    /// Write `stage{s}_epoch{e}.ckpt` every this many epochs; 0 disables.
    pub snapshot_every: usize,
    pub network: UNetConfig,
    pub checkpoint_dir: Option<PathBuf>,
    /// Skip stage 1 and fine-tune the supplied weights.
    pub stage2_only: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: 50 epochs per stage.
    fn default() -> Self {
        Self {
            stage1: StageConfig {
                epochs: 50,
                learning_rate: 2e-4,
            },
            stage2: StageConfig {
                epochs: 50,
                learning_rate: 5e-5,
            },
            batch_size: 16,
            loss_weight_missing: 12.0,
            seed: 0,
            n_mic_range: (5, 55),
            snapshot_every: 0,
            network: UNetConfig::default(),
            checkpoint_dir: None,
            stage2_only: false,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Published schedule: 400 epochs per stage.
    pub fn paper() -> Self {
        let mut c = Self::default();
        c.stage1.epochs = 400;
        c.stage2.epochs = 400;
        c
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("stage 1", self.stage1), ("stage 2", self.stage2)] {
            if !(s.learning_rate > 0.0 && s.learning_rate.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} learning rate must be positive")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.loss_weight_missing >= 0.0 && self.loss_weight_missing.is_finite()) {
            return Err(Error::InvalidArgument("loss weight must be finite and non-negative".into()));
        }
        let (lo, hi) = self.n_mic_range;
        if lo == 0 || lo > hi || hi > crate::grid::COARSE_N * crate::grid::COARSE_N {
            return Err(Error::InvalidArgument(format!("invalid microphone range {lo}..={hi}")));
        }
        self.network.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every learnable block of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub learning_rate: f64,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(weights: &UNetWeights<f32>, config: AdamConfig, learning_rate: f64) -> Self {
        let blocks = weights.learnable();
        Self {
            config,
            learning_rate,
            step: 0,
            m: blocks.iter().map(|b| vec![0.0; b.len()]).collect(),
            v: blocks.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn update(&mut self, weights: &mut UNetWeights<f32>, grads: &UNetWeights<f32>) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let lr_t = self.learning_rate * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t));
        let (b1, b2, lr_t, eps) = (beta1 as f32, beta2 as f32, lr_t as f32, eps as f32);
        let g_blocks = grads.learnable();
        for (((w, g), m), v) in weights
            .learnable_mut()
            .into_iter()
            .zip(g_blocks)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                w[i] -= lr_t * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub elapsed_s: f64,
}

/// Mutable training progress.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub stage: u8,
    pub epoch: usize,
    pub weights: UNetWeights<f32>,
    pub optimizer: Adam,
    pub best_val_loss: f64,
    pub best_weights: UNetWeights<f32>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: UNetWeights<f32>,
    pub best_val_loss: f64,
    pub best_stage: u8,
    pub best_epoch: usize,
    pub log: Vec<LogRow>,
}

pub fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// One supervised example: network input, scaled target and 0/1 mask, all `[k][j][i]`.
struct Example {
    input: NetworkInput,
    target: Vec<f32>,
}

fn make_example(field: &FieldTensor, target: &[f32], rng: &mut Rng, n_mic: (usize, usize)) -> Result<Example> {
    let count = rng.random_range(n_mic.0..=n_mic.1);
    let arrangement = sample_arrangement(rng, count)?;
    let input = prepare(&Observations::from_field(field, &arrangement))?;
    Ok(Example {
        input,
        target: target.to_vec(),
    })
}

fn stack_targets(examples: &[&Example]) -> Vec<f32> {
    examples.iter().flat_map(|e| e.target.iter().copied()).collect()
}

/// Mean per-sample loss of a batch and the gradient of that mean.
fn batch_loss(
    out: &Tensor<f32>,
    targets: &[f32],
    mask: &Tensor<f32>,
    weight: f64,
    want_grad: bool,
) -> Result<(f64, Option<Tensor<f32>>)> {
    let n = out.n();
    let per = out.sample_len();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Vec::with_capacity(out.data().len()));
    for b in 0..n {
        let t = &targets[b * per..(b + 1) * per];
        total += loss(out.sample(b), t, mask.sample(b), weight)?;
        if let Some(g) = grad.as_mut() {
            g.extend(loss_gradient(out.sample(b), t, mask.sample(b), weight, 1.0 / n as f64)?);
        }
    }
    let grad = match grad {
        Some(g) => Some(Tensor::from_vec(out.shape(), g)?),
        None => None,
    };
    Ok((total / n as f64, grad))
}

fn validation_loss(weights: &UNetWeights<f32>, examples: &[Example], config: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for chunk in examples.chunks(config.batch_size) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let inputs: Vec<&NetworkInput> = refs.iter().map(|e| &e.input).collect();
        let (x, m) = batch_inputs::<f32>(&inputs)?;
        let out = forward(weights, &x, &m, Mode::Inference, false)?.output;
        let (l, _) = batch_loss(&out, &stack_targets(&refs), &m, config.loss_weight_missing, false)?;
        total += l * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

fn scaled_targets(fields: &[FieldTensor]) -> Result<Vec<Vec<f32>>> {
    fields
        .iter()
        .map(|f| Ok(scaled_ground_truth(f)?.into_iter().map(|v| v as f32).collect()))
        .collect()
}

fn zero_encoder_bn_grads(grads: &mut UNetWeights<f32>) {
    for stage in &mut grads.encoder {
        if let Some(bn) = &mut stage.bn {
            bn.gamma.iter_mut().for_each(|g| *g = 0.0);
            bn.beta.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

/// Runs both stages (or only stage 2 when `config.stage2_only`) and returns the
/// weights with the lowest validation loss seen in any epoch.
///
/// `initial` overrides the random initialisation and is required for
/// `stage2_only`. When `checkpoint_dir` is set, `best.ckpt`, `log.csv` and
/// periodic snapshots are written there as training progresses.
/// Sets each head bias to the logit of the mean training target of its bin, so
/// the untrained network starts at the target level instead of at 0.5.
fn match_output_prior(weights: &mut UNetWeights<f32>, targets: &[Vec<f32>]) {
    let channels = weights.head.bias.len();
    if targets.is_empty() || targets[0].len() % channels != 0 {
        return;
    }
    let plane = targets[0].len() / channels;
    for (k, b) in weights.head.bias.iter_mut().enumerate() {
        let sum: f64 = targets.iter().map(|t| t[k * plane..(k + 1) * plane].iter().map(|&v| v as f64).sum::<f64>()).sum();
        let mean = (sum / (plane * targets.len()) as f64).clamp(1e-3, 1.0 - 1e-3);
        *b = (mean / (1.0 - mean)).ln() as f32;
    }
}

pub fn train(
    dataset: &DatasetManifest,
    config: &TrainConfig,
    initial: Option<UNetWeights<f32>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_ids = dataset.ids(Split::Train);
    let val_ids = dataset.ids(Split::Validation);
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(Error::InvalidArgument(
            "training needs at least one training and one validation room".into(),
        ));
    }
    if config.stage2_only && initial.is_none() {
        return Err(Error::InvalidArgument("stage-2-only training needs initial weights".into()));
    }
    let fresh = initial.is_none();
    let mut weights = match initial {
        Some(w) => {
            w.config.validate()?;
            w
        }
        None => UNetWeights::init(&config.network, &mut keyed(config.seed, &[TAG_INIT]))?,
    };
    if weights.config.in_channels != dataset.frequencies.len() {
        return Err(Error::Checkpoint(format!(
            "network has {} input channels but the dataset has {} frequencies",
            weights.config.in_channels,
            dataset.frequencies.len()
        )));
    }
    if let Some(dir) = &config.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let train_fields = load_fields(dataset, &train_ids)?;
    let train_targets = scaled_targets(&train_fields)?;
    if fresh {
        match_output_prior(&mut weights, &train_targets);
    }
    let val_fields = load_fields(dataset, &val_ids)?;
    let val_targets = scaled_targets(&val_fields)?;
    let validation: Vec<Example> = val_ids
        .iter()
        .zip(val_fields.iter().zip(&val_targets))
        .map(|(&id, (f, t))| make_example(f, t, &mut keyed(config.seed, &[TAG_VALID, id as u64]), config.n_mic_range))
        .collect::<Result<_>>()?;

    let started = Instant::now();
    let mut log = Vec::new();
    let mut state = TrainState {
        stage: 1,
        epoch: 0,
        optimizer: Adam::new(&weights, config.adam, config.stage1.learning_rate),
        best_weights: weights.clone(),
        weights,
        best_val_loss: f64::INFINITY,
    };
    let (mut best_stage, mut best_epoch) = (0u8, 0usize);

    let stages: &[(u8, StageConfig, Mode)] = &[
        (1, config.stage1, Mode::Train),
        (2, config.stage2, Mode::TrainFrozenEncoder),
    ];
    for &(stage, sc, mode) in stages {
        if stage == 1 && config.stage2_only {
            continue;
        }
        if stage == 2 && state.best_val_loss.is_finite() {
            state.weights = state.best_weights.clone();
        }
        state.stage = stage;
        state.optimizer = Adam::new(&state.weights, config.adam, sc.learning_rate);
        for epoch in 1..=sc.epochs {
            state.epoch = epoch;
            let train_loss = run_epoch(&mut state, mode, config, &train_ids, &train_fields, &train_targets)?;
            let val_loss = validation_loss(&state.weights, &validation, config)?;
            if !val_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "stage {stage} epoch {epoch}: validation loss is {val_loss}"
                )));
            }
            log.push(LogRow {
                stage,
                epoch,
                train_loss,
                val_loss,
                elapsed_s: started.elapsed().as_secs_f64(),
            });
            log::info!("stage {stage} epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
            let improved = val_loss < state.best_val_loss;
            if improved {
                state.best_val_loss = val_loss;
                state.best_weights = state.weights.clone();
                (best_stage, best_epoch) = (stage, epoch);
            }
            if let Some(dir) = &config.checkpoint_dir {
                if improved {
                    nn::checkpoint::save(&dir.join(BEST_CHECKPOINT), &state.best_weights)?;
                }
                if config.snapshot_every > 0 && epoch % config.snapshot_every == 0 {
                    let name = format!("stage{stage}_epoch{epoch:04}.ckpt");
                    nn::checkpoint::save(&dir.join(name), &state.weights)?;
                }
                write_log(&dir.join(LOG_FILE), &log)?;
            }
        }
    }
    if log.is_empty() {
        return Err(Error::InvalidArgument("no epochs were scheduled".into()));
    }
    Ok(TrainOutcome {
        best: state.best_weights,
        best_val_loss: state.best_val_loss,
        best_stage,
        best_epoch,
        log,
    })
}

fn run_epoch(
    state: &mut TrainState,
    mode: Mode,
    config: &TrainConfig,
    ids: &[usize],
    fields: &[FieldTensor],
    targets: &[Vec<f32>],
) -> Result<f64> {
    let (stage, epoch) = (state.stage as u64, state.epoch as u64);
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut keyed(config.seed, &[TAG_ORDER, stage, epoch]));
    let mut total = 0.0;
    for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
        let examples: Vec<Example> = chunk
            .par_iter()
            .map(|&p| {
                let mut rng = keyed(config.seed, &[TAG_TRAIN, stage, epoch, ids[p] as u64]);
                make_example(&fields[p], &targets[p], &mut rng, config.n_mic_range)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Example> = examples.iter().collect();
        let inputs: Vec<&NetworkInput> = refs.iter().map(|e| &e.input).collect();
        let (x, m) = batch_inputs::<f32>(&inputs)?;
        let fwd = forward(&state.weights, &x, &m, mode, true).map_err(|e| match e {
            Error::NonFinite(what) => Error::Diverged(format!(
                "stage {stage} epoch {epoch} batch {batch_no}: non-finite {what}"
            )),
            other => other,
        })?;
        let (l, grad) = batch_loss(&fwd.output, &stack_targets(&refs), &m, config.loss_weight_missing, true)?;
        if !l.is_finite() {
            return Err(Error::Diverged(format!(
                "stage {stage} epoch {epoch} batch {batch_no}: loss is {l}"
            )));
        }
        let cache = fwd.cache.expect("cache requested");
        let mut grads = backward(&state.weights, &cache, &grad.expect("gradient requested"))?;
        if mode == Mode::TrainFrozenEncoder {
            zero_encoder_bn_grads(&mut grads);
        }
        if !grads.all_finite() {
            return Err(Error::Diverged(format!(
                "stage {stage} epoch {epoch} batch {batch_no}: non-finite gradient"
            )));
        }
        state.optimizer.update(&mut state.weights, &grads);
        let stats: Vec<_> = fwd
            .batch_stats
            .into_iter()
            .filter(|(id, _)| mode == Mode::Train || matches!(id, LayerId::Decoder(_)))
            .collect();
        state.weights.update_running_stats(&stats);
        total += l * chunk.len() as f64;
    }
    Ok(total / ids.len() as f64)
}
