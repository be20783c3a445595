//! SGD with momentum and weight decay, training runs, sweeps and ablations.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{augment, epoch_order, AugmentConfig, Dataset, Splits, Standardization};
use crate::error::{Error, Result};
use crate::init::stream_rng;
use crate::layers::{Network, NetworkSpec, Param};
use crate::normalize::{Mode, NormalizerConfig};
use crate::tensor::Tensor;

/// Batch size the configured learning rate refers to under linear scaling.
pub const REFERENCE_BATCH: usize = 64;

/// Step decay: `initial * factor^k` after the k-th decay epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    /// Zero-based epochs at whose start the rate is multiplied by `factor`.
    pub decay_epochs: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    /// Decay by 0.1 at 50% and 75% of `epochs`.
    pub fn step(initial: f64, epochs: usize) -> Self {
        let mut decay_epochs = vec![epochs / 2, epochs * 3 / 4];
        decay_epochs.retain(|&e| e > 0 && e < epochs);
        decay_epochs.dedup();
        LrSchedule {
            initial,
            decay_epochs,
            factor: 0.1,
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        let k = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.initial * self.factor.powi(k as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Evaluate the test split every this many epochs (and after the last).
    #[serde(default = "one")]
    pub eval_every: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
}

fn one() -> usize {
    1
}

fn default_eval_batch() -> usize {
    500
}

impl TrainConfig {
    /// Momentum 0.9, weight decay 5e-4, step schedule.
    pub fn new(batch_size: usize, epochs: usize, lr: f64, seed: u64) -> Self {
        TrainConfig {
            batch_size,
            epochs,
            lr: LrSchedule::step(lr, epochs),
            momentum: 0.9,
            weight_decay: 5e-4,
            seed,
            eval_every: 1,
            eval_batch: default_eval_batch(),
            augment: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr.initial >= 0.0) || !self.lr.initial.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.lr.initial)));
        }
        if !(self.lr.factor > 0.0) {
            return Err(Error::Config(format!("decay factor {} must be > 0", self.lr.factor)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        if self.eval_every == 0 || self.eval_batch == 0 {
            return Err(Error::Config("eval_every and eval_batch must be >= 1".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    /// Same config with the learning rate scaled linearly from
    /// [`REFERENCE_BATCH`] to `batch_size`.
    pub fn scaled_to(&self, batch_size: usize) -> Self {
        let k = batch_size as f64 / REFERENCE_BATCH as f64;
        let mut cfg = self.clone();
        cfg.batch_size = batch_size;
        cfg.lr.initial *= k;
        cfg
    }
}

/// One SGD update: `g' = g + wd*w; v = m*v + g'; w -= lr*v`.
///
/// Every gradient is checked before anything is written, so a non-finite
/// gradient leaves parameters and velocities untouched.
pub fn sgd_step(params: &mut [Param], grads: &[Tensor], velocity: &mut [Tensor], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Shape(format!(
            "{} params, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if p.value.shape() != g.shape() || p.value.shape() != v.shape() {
            return Err(Error::Shape(format!("gradient shape mismatch for {}", p.name)));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + (gi + weight_decay * *w);
            *w -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Percent.
    pub train_error: f64,
    /// Percent; absent on epochs without evaluation.
    pub test_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub network: NetworkSpec,
    pub config: TrainConfig,
    pub standardization: Standardization,
    /// Loss of the first mini-batch before any update.
    pub initial_loss: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub diverged: bool,
    #[serde(default)]
    pub divergence: Option<String>,
    #[serde(default)]
    pub skipped: Option<String>,
    /// Activation-statistic computations performed while training.
    pub sample_stat_evaluations: u64,
}

impl RunRecord {
    fn skipped(label: String, network: NetworkSpec, config: TrainConfig, standardization: Standardization, reason: String) -> Self {
        RunRecord {
            label,
            network,
            config,
            standardization,
            initial_loss: None,
            epochs: Vec::new(),
            diverged: false,
            divergence: None,
            skipped: Some(reason),
            sample_stat_evaluations: 0,
        }
    }

    /// Test error of the last evaluated epoch.
    pub fn final_test_error(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.test_error)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// A finished run plus its wall time, kept apart so records stay reproducible.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    pub wall_seconds: f64,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Number of rows of `logits` whose argmax differs from the label.
pub fn count_errors(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) != l)
        .count()
}

/// Mean loss and percent error on `data` in evaluation mode.
pub fn evaluate(net: &mut Network, data: &Dataset, batch: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::EmptySplit("evaluation split has no samples".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut loss = 0.0;
    let mut wrong = 0;
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let logits = net.predict(&x, Mode::Eval)?;
        loss += crate::layers::cross_entropy(&logits, &y)? * chunk.len() as f64;
        wrong += count_errors(&logits, &y);
    }
    let n = data.len() as f64;
    Ok((loss / n, 100.0 * wrong as f64 / n))
}

enum StepOutcome {
    Loss { loss: f64, wrong: usize, stats: u64 },
    Diverged(String),
}

fn train_step(net: &mut Network, x: Tensor, y: &[usize], velocity: &mut [Tensor], lr: f64, cfg: &TrainConfig) -> Result<StepOutcome> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g);
    let input = g.constant(x);
    let logits = net.forward(&mut g, &bound, input, Mode::Train)?;
    let loss_node = g.cross_entropy(logits, y)?;
    let loss = g.value(loss_node).item()?;
    if !loss.is_finite() {
        return Ok(StepOutcome::Diverged(format!("training loss became {loss}")));
    }
    let wrong = count_errors(g.value(logits), y);
    let mut grads = g.backward(loss_node)?;
    let grads: Vec<Tensor> = bound
        .nodes()
        .iter()
        .zip(net.params())
        .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    match sgd_step(net.params_mut(), &grads, velocity, lr, cfg.momentum, cfg.weight_decay) {
        Ok(()) => {}
        Err(Error::NonFinite(what)) => return Ok(StepOutcome::Diverged(format!("non-finite {what}"))),
        Err(e) => return Err(e),
    }
    Ok(StepOutcome::Loss {
        loss,
        wrong,
        stats: g.sample_stat_evaluations(),
    })
}

/// Trains `net` in place. Divergence ends the run early and is recorded,
/// not returned as an error.
pub fn train(net: &mut Network, data: &Splits, cfg: &TrainConfig, label: &str) -> Result<RunOutput> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptySplit("training split has no samples".into()));
    }
    if data.train.sample_shape() != net.spec().input_shape {
        return Err(Error::Shape(format!(
            "dataset samples are {:?}, network expects {:?}",
            data.train.sample_shape(),
            net.spec().input_shape
        )));
    }
    let started = Instant::now();
    let mut record = RunRecord {
        label: label.to_string(),
        network: net.spec().clone(),
        config: cfg.clone(),
        standardization: data.train.norm.clone(),
        initial_loss: None,
        epochs: Vec::new(),
        diverged: false,
        divergence: None,
        skipped: None,
        sample_stat_evaluations: 0,
    };
    let mut velocity: Vec<Tensor> = net.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    let n = data.train.len();
    let mut above = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.lr.at(epoch);
        let order = epoch_order(n, cfg.seed, epoch);
        let mut aug_rng = stream_rng(cfg.seed, 2 << 32 | epoch as u64);
        let mut loss_sum = 0.0;
        let mut wrong = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (mut x, y) = data.train.batch(chunk)?;
            if let Some(a) = &cfg.augment {
                x = augment(&x, a, &mut aug_rng)?;
            }
            match train_step(net, x, &y, &mut velocity, lr, cfg)? {
                StepOutcome::Loss { loss, wrong: w, stats } => {
                    record.initial_loss.get_or_insert(loss);
                    loss_sum += loss * chunk.len() as f64;
                    wrong += w;
                    record.sample_stat_evaluations += stats;
                }
                StepOutcome::Diverged(why) => {
                    record.diverged = true;
                    record.divergence = Some(format!("epoch {epoch}: {why}"));
                    break 'epochs;
                }
            }
        }
        let train_loss = loss_sum / n as f64;
        let last = epoch + 1 == cfg.epochs;
        let test_error = if last || (epoch + 1) % cfg.eval_every == 0 {
            Some(evaluate(net, &data.test, cfg.eval_batch)?.1)
        } else {
            None
        };
        record.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            train_error: 100.0 * wrong as f64 / n as f64,
            test_error,
        });
        let initial = record.initial_loss.unwrap_or(f64::INFINITY);
        above = if train_loss > 10.0 * initial { above + 1 } else { 0 };
        if above >= 3 {
            record.diverged = true;
            record.divergence = Some(format!(
                "epoch {epoch}: loss above 10x the initial {initial:.4} for 3 consecutive epochs"
            ));
            break;
        }
    }
    Ok(RunOutput {
        record,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// One independent training run of a sweep or ablation.
#[derive(Debug, Clone)]
pub struct Arm {
    pub label: String,
    pub spec: NetworkSpec,
    pub config: TrainConfig,
    pub skip: Option<String>,
}

/// Runs arms on up to `jobs` threads; results keep the arm order.
pub fn run_arms(arms: &[Arm], data: &Splits, jobs: usize) -> Result<Vec<RunOutput>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunOutput>>>> = Mutex::new((0..arms.len()).map(|_| None).collect());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(arm) = arms.get(i) else { break };
        let out = match &arm.skip {
            Some(reason) => Ok(RunOutput {
                record: RunRecord::skipped(
                    arm.label.clone(),
                    arm.spec.clone(),
                    arm.config.clone(),
                    data.train.norm.clone(),
                    reason.clone(),
                ),
                wall_seconds: 0.0,
            }),
            None => Network::build(arm.spec.clone()).and_then(|mut net| train(&mut net, data, &arm.config, &arm.label)),
        };
        slots.lock().unwrap()[i] = Some(out);
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, arms.len().max(1)) {
            s.spawn(worker);
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every arm ran"))
        .collect()
}

fn uses_batch_norm(spec: &NetworkSpec) -> bool {
    spec.layers.iter().any(|l| matches!(l.normalizer, NormalizerConfig::Bn { .. }))
}

/// Arms for one network at several batch sizes, with linearly scaled rates.
/// Batch-norm networks at batch size 1 are marked skipped.
pub fn batch_arms(label: &str, spec: &NetworkSpec, sizes: &[usize], template: &TrainConfig) -> Result<Vec<Arm>> {
    if sizes.contains(&0) {
        return Err(Error::Config("batch sizes must be >= 1".into()));
    }
    Ok(sizes
        .iter()
        .map(|&bs| Arm {
            label: format!("{label}/bs{bs}"),
            spec: spec.clone(),
            config: template.scaled_to(bs),
            skip: (bs == 1 && uses_batch_norm(spec))
                .then(|| "batch norm has no batch statistics at batch size 1".to_string()),
        })
        .collect())
}

pub fn sweep_batch(spec: &NetworkSpec, data: &Splits, sizes: &[usize], template: &TrainConfig, jobs: usize) -> Result<Vec<RunOutput>> {
    run_arms(&batch_arms("sweep", spec, sizes, template)?, data, jobs)
}

/// Arms that scale every WeightAlign denominator by each multiplier.
pub fn scale_arms(label: &str, spec: &NetworkSpec, multipliers: &[f64], cfg: &TrainConfig) -> Result<Vec<Arm>> {
    if !spec.layers.iter().any(|l| l.reparameterizer.is_weight_align()) {
        return Err(Error::Config("scale ablation needs a network with WeightAlign layers".into()));
    }
    if let Some(m) = multipliers.iter().find(|&&m| !(m > 0.0)) {
        return Err(Error::Config(format!("multiplier {m} must be > 0")));
    }
    Ok(multipliers
        .iter()
        .map(|&m| Arm {
            label: format!("{label}/x{m}"),
            spec: spec.clone().map_weight_align(|c| c.scale_multiplier = m),
            config: cfg.clone(),
            skip: None,
        })
        .collect())
}

pub fn ablate_scale(spec: &NetworkSpec, data: &Splits, multipliers: &[f64], cfg: &TrainConfig, jobs: usize) -> Result<Vec<RunOutput>> {
    run_arms(&scale_arms("ablate", spec, multipliers, cfg)?, data, jobs)
}
