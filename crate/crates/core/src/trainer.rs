//! The training session: configuration, parameters, optimizer state and
//! the epoch loop.
//!
//! An epoch runs `batches_per_epoch` batches of forward, backward and Adam
//! update, then one free-running prediction on a fixed held-out sequence.
//! All randomness comes from the session's data stream, so a config and a
//! command sequence fully determine the loss history.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bptt::{
    clip_gradients, example_gradient, global_norm, sequence_loss, BackwardResult, BatchAccumulator,
    BpttError, Example, GradientSet, LossKind,
};
use crate::cells::{free_run, Architecture, CellKind, Feedback, ModelError, ParameterSet, MAX_LAYERS};
use crate::data::{
    generate_sequence, sample_batch, text_windows, DataError, FunctionKind, Task, TextCorpus,
    TextSample,
};
use crate::math::{InitScheme, RngStream, Vector};
use crate::optim::{optimizer_step, OptimizerState};
use crate::scalar::Scalar;

pub const MAX_HIDDEN: usize = 64;
pub const MAX_BATCH: usize = 64;
pub const MIN_LEARNING_RATE: f64 = 1e-5;
pub const MAX_LEARNING_RATE: f64 = 1.0;
pub const MAX_WINDOW: usize = 200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("training diverged (non-finite loss or gradient); reset to continue")]
    Diverged,
    #[error("architecture edit rejected: {0}")]
    ArchitectureEdit(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bptt(#[from] BpttError),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> TrainError {
    TrainError::InvalidConfig {
        field,
        reason: reason.into(),
    }
}

/// Network and training configuration, serializable as a flat key-value document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub cell_kind: CellKind,
    pub layer_count: usize,
    pub hidden: usize,
    pub task: Task,
    /// Observed points before the first prediction.
    pub window: usize,
    /// Predicted points per sample (function tasks; text always predicts one).
    pub horizon: usize,
    pub noise_amp: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub seed: u64,
    /// Spacing between consecutive function samples.
    pub sample_spacing: f64,
    pub init: InitScheme,
    pub forget_bias: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            cell_kind: CellKind::Lstm,
            layer_count: 1,
            hidden: 16,
            task: Task::Sine,
            window: 25,
            horizon: 5,
            noise_amp: 0.0,
            learning_rate: 0.01,
            batch_size: 8,
            batches_per_epoch: 10,
            seed: 0,
            sample_spacing: 0.2,
            init: InitScheme::GlorotUniform,
            forget_bias: 1.0,
            clip_norm: Some(5.0),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(1..=MAX_LAYERS).contains(&self.layer_count) {
            return Err(invalid(
                "layer_count",
                format!("{} outside 1..={MAX_LAYERS}", self.layer_count),
            ));
        }
        if !(1..=MAX_HIDDEN).contains(&self.hidden) {
            return Err(invalid("hidden", format!("{} outside 1..={MAX_HIDDEN}", self.hidden)));
        }
        if !(1..=MAX_WINDOW).contains(&self.window) {
            return Err(invalid("window", format!("{} outside 1..={MAX_WINDOW}", self.window)));
        }
        if !(1..=self.window.max(1)).contains(&self.horizon) && !self.task.is_text() {
            return Err(invalid("horizon", format!("{} outside 1..={}", self.horizon, self.window)));
        }
        check_noise(self.noise_amp)?;
        check_learning_rate(self.learning_rate)?;
        check_batch_size(self.batch_size)?;
        if self.batches_per_epoch == 0 {
            return Err(invalid("batches_per_epoch", "must be at least 1"));
        }
        if !(self.sample_spacing > 0.0 && self.sample_spacing.is_finite()) {
            return Err(invalid("sample_spacing", "must be positive"));
        }
        if !self.forget_bias.is_finite() {
            return Err(invalid("forget_bias", "must be finite"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(invalid("clip_norm", "must be positive"));
            }
        }
        if let Some(corpus) = self.task.corpus() {
            if corpus.len() <= self.window {
                return Err(invalid(
                    "window",
                    format!("{} is not shorter than the {} corpus", self.window, self.task),
                ));
            }
        }
        Ok(())
    }

    /// Readouts per sample: the configured horizon, or 1 for text.
    pub fn effective_horizon(&self) -> usize {
        if self.task.is_text() {
            1
        } else {
            self.horizon
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        if self.task.is_text() {
            LossKind::SoftmaxCrossEntropy
        } else {
            LossKind::Mse
        }
    }

    pub fn architecture(&self) -> Architecture {
        let dim = match self.task.corpus() {
            Some(c) => c.alphabet.len(),
            None => 1,
        };
        Architecture {
            cell_kind: self.cell_kind,
            input_dim: dim,
            hidden: self.hidden,
            layers: self.layer_count,
            output_dim: dim,
            init: self.init,
            forget_bias: self.forget_bias,
        }
    }
}

fn check_noise(v: f64) -> Result<(), TrainError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(invalid("noise_amp", format!("{v} outside [0, 1]")));
    }
    Ok(())
}

fn check_learning_rate(v: f64) -> Result<(), TrainError> {
    if !(MIN_LEARNING_RATE..=MAX_LEARNING_RATE).contains(&v) {
        return Err(invalid(
            "learning_rate",
            format!("{v} outside [{MIN_LEARNING_RATE}, {MAX_LEARNING_RATE}]"),
        ));
    }
    Ok(())
}

fn check_batch_size(v: usize) -> Result<(), TrainError> {
    if !(1..=MAX_BATCH).contains(&v) {
        return Err(invalid("batch_size", format!("{v} outside 1..={MAX_BATCH}")));
    }
    Ok(())
}

/// The three visible stages of an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prediction,
    Validation,
    Training,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Prediction, Phase::Validation, Phase::Training];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Prediction => "prediction",
            Phase::Validation => "validation",
            Phase::Training => "training",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Phase::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown phase `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

/// Held-out prediction of the latest epoch, in plot-ready form.
///
/// Function tasks: `input` is the observed window, `target` and
/// `prediction` the next `horizon` values, `error` their pointwise
/// difference. Text tasks: values are alphabet indices and the `*_text`
/// fields carry the characters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationView {
    pub xs: Vec<f64>,
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub prediction: Vec<f64>,
    pub error: Vec<f64>,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub validation_loss: f64,
    pub validation_prediction: Vec<f64>,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperParam {
    LearningRate,
    BatchSize,
    NoiseAmp,
}

impl std::str::FromStr for HyperParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "learning_rate" | "lr" => Ok(HyperParam::LearningRate),
            "batch_size" | "batch" => Ok(HyperParam::BatchSize),
            "noise_amp" | "noise" => Ok(HyperParam::NoiseAmp),
            other => Err(format!("unknown hyperparameter `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchEdit {
    AddLayer { at: usize },
    RemoveLayer { at: usize },
    SetCellKind { cell: CellKind },
    SetTask { task: Task },
}

/// Where training examples come from.
#[derive(Debug, Clone)]
enum TaskData<S> {
    Function(FunctionKind),
    Text {
        corpus: TextCorpus,
        pool: Arc<Vec<TextSample<S>>>,
    },
}

/// A fixed held-out sample reused every epoch.
#[derive(Debug, Clone)]
struct ValidationFixture<S> {
    xs: Vec<f64>,
    inputs: Vec<Vector<S>>,
    targets: Vec<Vector<S>>,
    text_offset: Option<usize>,
}

/// The single mutable root of a training run.
#[derive(Debug, Clone)]
pub struct TrainingSession<S: Scalar> {
    pub config: NetworkConfig,
    pub params: ParameterSet<S>,
    pub opt: OptimizerState<S>,
    pub rng: RngStream,
    pub epoch: usize,
    pub phase: Phase,
    pub loss_history: Vec<LossRecord>,
    pub last_validation: Option<ValidationView>,
    /// `‖∂L/∂a‖ [layer][t]` of the most recent visualized example.
    pub last_grad_norms: Vec<Vec<f64>>,
    pub diverged: bool,
    task_data: TaskData<S>,
    validation: ValidationFixture<S>,
}

impl<S: Scalar> TrainingSession<S> {
    pub fn new(config: NetworkConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let arch = config.architecture();
        let mut init_rng = RngStream::derive(config.seed, &format!("params/{}", arch_key(&config)));
        let params = ParameterSet::init(&arch, &mut init_rng)?;
        let opt = OptimizerState::adam(&params);
        let task_data = match config.task.corpus() {
            Some(corpus) => TaskData::Text {
                pool: Arc::new(text_windows(&corpus, config.window)?),
                corpus,
            },
            None => TaskData::Function(config.task.function().expect("function task")),
        };
        let validation = build_validation(&config, &task_data)?;
        Ok(Self {
            rng: RngStream::derive(config.seed, "data"),
            config,
            params,
            opt,
            epoch: 0,
            phase: Phase::Prediction,
            loss_history: Vec::new(),
            last_validation: None,
            last_grad_norms: Vec::new(),
            diverged: false,
            task_data,
            validation,
        })
    }

    pub fn loss_kind(&self) -> LossKind {
        self.config.loss_kind()
    }

    /// Text corpus of the current task, if any.
    pub fn corpus(&self) -> Option<&TextCorpus> {
        match &self.task_data {
            TaskData::Text { corpus, .. } => Some(corpus),
            TaskData::Function(_) => None,
        }
    }

    /// Draws every example of one epoch: `batches_per_epoch` batches of `batch_size`.
    pub fn draw_epoch_data(&self, rng: &mut RngStream) -> Result<Vec<Vec<Example<S>>>, TrainError> {
        let cfg = &self.config;
        (0..cfg.batches_per_epoch)
            .map(|_| match &self.task_data {
                TaskData::Function(kind) => (0..cfg.batch_size)
                    .map(|_| function_example(cfg, *kind, rng))
                    .collect(),
                TaskData::Text { pool, .. } => Ok(sample_batch(pool, cfg.batch_size, rng)?
                    .into_iter()
                    .map(|s| Example {
                        inputs: s.inputs.clone(),
                        targets: vec![s.target.clone()],
                    })
                    .collect()),
            })
            .collect()
    }

    /// Averages `first` with the gradients of `rest` (in order) and applies
    /// one update. Returns the batch loss and the gradient norm before clipping.
    pub(crate) fn train_batch(
        &mut self,
        first: BackwardResult<S>,
        rest: &[Example<S>],
    ) -> Result<(S, S), TrainError> {
        let kind = self.loss_kind();
        let mut acc = BatchAccumulator::new(&self.params);
        acc.add(first.loss, &first.grads);
        for ex in rest {
            let r = example_gradient(&self.params, ex, kind)?;
            acc.add(r.loss, &r.grads);
        }
        let (loss, grads) = acc.mean();
        let norm = self.apply_update(loss, grads)?;
        Ok((loss, norm))
    }

    fn apply_update(&mut self, loss: S, grads: GradientSet<S>) -> Result<S, TrainError> {
        let norm = global_norm(&grads);
        if !loss.is_finite() || !norm.is_finite() {
            self.diverged = true;
            return Err(TrainError::Diverged);
        }
        let grads = match self.config.clip_norm {
            Some(max) => clip_gradients(grads, S::of(max)).0,
            None => grads,
        };
        optimizer_step(&mut self.params, &grads, &mut self.opt, self.config.learning_rate);
        Ok(norm)
    }

    /// Free-running prediction over the held-out fixture.
    pub fn validate(&self) -> Result<ValidationView, TrainError> {
        let fx = &self.validation;
        let kind = self.loss_kind();
        let horizon = fx.targets.len();
        let feedback = if self.config.task.is_text() {
            Feedback::ArgmaxOneHot
        } else {
            Feedback::Value
        };
        let run = free_run(&self.params, &fx.inputs, horizon, feedback)?;
        let loss = sequence_loss(kind, &run.predictions, &fx.targets)?.as_f64();
        Ok(match self.corpus() {
            None => {
                let input: Vec<f64> = fx.inputs.iter().map(|v| v[0].as_f64()).collect();
                let target: Vec<f64> = fx.targets.iter().map(|v| v[0].as_f64()).collect();
                let prediction: Vec<f64> = run.predictions.iter().map(|v| v[0].as_f64()).collect();
                let error = prediction.iter().zip(&target).map(|(p, t)| p - t).collect();
                ValidationView {
                    xs: fx.xs.clone(),
                    input,
                    target,
                    prediction,
                    error,
                    loss,
                    input_text: None,
                    target_text: None,
                    predicted_text: None,
                }
            }
            Some(corpus) => {
                let index = |v: &Vector<S>| v.argmax().unwrap_or(0);
                let input: Vec<usize> = fx.inputs.iter().map(index).collect();
                let target: Vec<usize> = fx.targets.iter().map(index).collect();
                let prediction: Vec<usize> = run.predictions.iter().map(index).collect();
                let chars = |ix: &[usize]| ix.iter().map(|&i| corpus.alphabet[i]).collect::<String>();
                let offset = fx.text_offset.unwrap_or(0);
                ValidationView {
                    xs: (offset..offset + input.len() + target.len()).map(|i| i as f64).collect(),
                    input: input.iter().map(|&i| i as f64).collect(),
                    target: target.iter().map(|&i| i as f64).collect(),
                    prediction: prediction.iter().map(|&i| i as f64).collect(),
                    error: vec![loss],
                    loss,
                    input_text: Some(chars(&input)),
                    target_text: Some(chars(&target)),
                    predicted_text: Some(chars(&prediction)),
                }
            }
        })
    }

    /// Runs validation and records the epoch.
    pub(crate) fn finish_epoch(
        &mut self,
        batch_losses: &[S],
        started: Instant,
    ) -> Result<EpochReport, TrainError> {
        let mut sum = S::zero();
        for &l in batch_losses {
            sum += l;
        }
        let mean_train_loss = (sum / S::of(batch_losses.len().max(1) as f64)).as_f64();
        let view = self.validate()?;
        if !view.loss.is_finite() || !mean_train_loss.is_finite() {
            self.diverged = true;
            return Err(TrainError::Diverged);
        }
        self.epoch += 1;
        self.phase = Phase::Prediction;
        self.loss_history.push(LossRecord {
            epoch: self.epoch,
            train_loss: mean_train_loss,
            validation_loss: view.loss,
        });
        let report = EpochReport {
            epoch: self.epoch,
            mean_train_loss,
            validation_loss: view.loss,
            validation_prediction: view.prediction.clone(),
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        self.last_validation = Some(view);
        Ok(report)
    }

    /// One full epoch: training batches, then the held-out prediction.
    pub fn run_epoch(&mut self) -> Result<EpochReport, TrainError> {
        if self.diverged {
            return Err(TrainError::Diverged);
        }
        let started = Instant::now();
        let mut rng = self.rng.clone();
        let data = self.draw_epoch_data(&mut rng)?;
        self.rng = rng;
        let kind = self.loss_kind();
        let mut losses = Vec::with_capacity(data.len());
        for (b, batch) in data.iter().enumerate() {
            let first = example_gradient(&self.params, &batch[0], kind)?;
            if b == 0 {
                self.last_grad_norms = norms_to_f64(&first.grad_norms);
            }
            losses.push(self.train_batch(first, &batch[1..])?.0);
        }
        self.finish_epoch(&losses, started)
    }

    pub fn set_hyperparam(&mut self, name: HyperParam, value: f64) -> Result<(), TrainError> {
        match name {
            HyperParam::LearningRate => {
                check_learning_rate(value)?;
                self.config.learning_rate = value;
            }
            HyperParam::BatchSize => {
                if value.fract() != 0.0 || value < 0.0 {
                    return Err(invalid("batch_size", format!("{value} is not a whole number")));
                }
                check_batch_size(value as usize)?;
                self.config.batch_size = value as usize;
            }
            HyperParam::NoiseAmp => {
                check_noise(value)?;
                self.config.noise_amp = value;
            }
        }
        Ok(())
    }

    /// Applies an architecture edit. Always restarts training from a freshly
    /// initialized network.
    pub fn edit_architecture(&mut self, edit: ArchEdit) -> Result<(), TrainError> {
        let mut cfg = self.config.clone();
        match edit {
            ArchEdit::AddLayer { at } => {
                if cfg.layer_count >= MAX_LAYERS {
                    return Err(TrainError::ArchitectureEdit(format!(
                        "network already has the maximum of {MAX_LAYERS} layers"
                    )));
                }
                if at > cfg.layer_count {
                    return Err(TrainError::ArchitectureEdit(format!(
                        "cannot insert at {at} in a {}-layer network",
                        cfg.layer_count
                    )));
                }
                cfg.layer_count += 1;
            }
            ArchEdit::RemoveLayer { at } => {
                if cfg.layer_count <= 1 {
                    return Err(TrainError::ArchitectureEdit(
                        "cannot remove the only layer".into(),
                    ));
                }
                if at >= cfg.layer_count {
                    return Err(TrainError::ArchitectureEdit(format!(
                        "no layer {at} in a {}-layer network",
                        cfg.layer_count
                    )));
                }
                cfg.layer_count -= 1;
            }
            ArchEdit::SetCellKind { cell } => cfg.cell_kind = cell,
            ArchEdit::SetTask { task } => cfg.task = task,
        }
        *self = Self::new(cfg)?;
        Ok(())
    }

    /// Back to a fresh session with the current config and original seed.
    pub fn reset(&mut self) -> Result<(), TrainError> {
        *self = Self::new(self.config.clone())?;
        Ok(())
    }
}

/// Stable key naming the architecture, mixed into the init seed.
fn arch_key(cfg: &NetworkConfig) -> String {
    format!("{}/{}x{}/{}", cfg.cell_kind, cfg.layer_count, cfg.hidden, cfg.task)
}

pub(crate) fn norms_to_f64<S: Scalar>(norms: &[Vec<S>]) -> Vec<Vec<f64>> {
    norms
        .iter()
        .map(|row| row.iter().map(|v| v.as_f64()).collect())
        .collect()
}

/// Teacher-forced function example: inputs are the first `T + k − 1`
/// values, targets the last `k`.
fn function_example<S: Scalar>(
    cfg: &NetworkConfig,
    kind: FunctionKind,
    rng: &mut RngStream,
) -> Result<Example<S>, TrainError> {
    let (t, k) = (cfg.window, cfg.effective_horizon());
    let x0 = rng.uniform(0.0, kind.period());
    let seq = generate_sequence(kind, x0, (t + k).max(2), cfg.sample_spacing, cfg.noise_amp, rng)?;
    let values = &seq.values[..t + k];
    Ok(Example {
        inputs: values[..t + k - 1].iter().map(|&v| Vector::from_f64(&[v])).collect(),
        targets: values[t..].iter().map(|&v| Vector::from_f64(&[v])).collect(),
    })
}

fn build_validation<S: Scalar>(
    cfg: &NetworkConfig,
    data: &TaskData<S>,
) -> Result<ValidationFixture<S>, TrainError> {
    let mut rng = RngStream::derive(cfg.seed, "validation");
    match data {
        TaskData::Function(kind) => {
            let (t, k) = (cfg.window, cfg.effective_horizon());
            let x0 = rng.uniform(0.0, kind.period());
            let seq = generate_sequence(*kind, x0, (t + k).max(2), cfg.sample_spacing, 0.0, &mut rng)?;
            Ok(ValidationFixture {
                xs: seq.xs[..t + k].to_vec(),
                inputs: seq.values[..t].iter().map(|&v| Vector::from_f64(&[v])).collect(),
                targets: seq.values[t..t + k].iter().map(|&v| Vector::from_f64(&[v])).collect(),
                text_offset: None,
            })
        }
        TaskData::Text { pool, .. } => {
            let sample = &pool[rng.below(pool.len() as u64) as usize];
            Ok(ValidationFixture {
                xs: Vec::new(),
                inputs: sample.inputs.clone(),
                targets: vec![sample.target.clone()],
                text_offset: Some(sample.offset),
            })
        }
    }
}
