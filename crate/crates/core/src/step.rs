//! Micro-step execution of one epoch.
//!
//! [`compile_epoch_plan`] lays out the events of an epoch; [`StepPlan::advance`]
//! computes them one at a time. The visualized example (batch 1, element 1)
//! is executed cell stage by cell stage and backward `(layer, t)` by
//! `(layer, t)`. Everything else in the epoch runs inside `weights_updated`
//! and `epoch_done`. Advancing to the end leaves the session in exactly
//! the state [`TrainingSession::run_epoch`] would.

use std::io::{self, Write};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bptt::{example_gradient, BackwardSweep, BpttError, Example};
use crate::cells::{output_head, CellStep, ForwardTrace, ModelError, NetworkState};
use crate::math::{RngStream, Vector};
use crate::scalar::Scalar;
use crate::trainer::{norms_to_f64, EpochReport, Phase, TrainError, TrainingSession};

#[derive(Debug, Error)]
pub enum StepError {
    #[error("plan is finished; compile the next epoch")]
    Finished,
    #[error("plan was compiled for epoch {plan} but the session is at epoch {session}")]
    StalePlan { plan: usize, session: usize },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Bptt(#[from] BpttError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("writing trace: {0}")]
    Io(#[from] io::Error),
}

/// What a micro-step does. `layer` is zero-based, `t` one-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepDetail {
    LayerInput { layer: usize, t: usize },
    GateActivations { layer: usize, t: usize },
    CellStateUpdate { layer: usize, t: usize },
    OutputActivation { layer: usize, t: usize },
    LossComputed,
    BackwardStep { layer: usize, t: usize },
    WeightsUpdated,
    EpochDone,
}

impl StepDetail {
    pub fn phase(self) -> Phase {
        match self {
            StepDetail::LayerInput { .. }
            | StepDetail::GateActivations { .. }
            | StepDetail::CellStateUpdate { .. }
            | StepDetail::OutputActivation { .. } => Phase::Prediction,
            StepDetail::LossComputed => Phase::Validation,
            StepDetail::BackwardStep { .. } | StepDetail::WeightsUpdated | StepDetail::EpochDone => {
                Phase::Training
            }
        }
    }

    /// Human-readable label of the step.
    pub fn label(self) -> &'static str {
        match self {
            StepDetail::LayerInput { .. } => "receiving the layer input",
            StepDetail::GateActivations { .. } => "calculating the gate activations",
            StepDetail::CellStateUpdate { .. } => "updating the cell state",
            StepDetail::OutputActivation { .. } => "outputting the activation value",
            StepDetail::LossComputed => "computing the loss",
            StepDetail::BackwardStep { .. } => "propagating the error backward",
            StepDetail::WeightsUpdated => "updating the weights",
            StepDetail::EpochDone => "epoch finished",
        }
    }

    pub fn is_forward(self) -> bool {
        self.phase() == Phase::Prediction
    }
}

/// Values produced by a micro-step, widened to `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepPayload {
    LayerInput {
        x: Vec<f64>,
        a_prev: Vec<f64>,
        c_prev: Vec<f64>,
    },
    /// Empty vectors for vanilla cells.
    Gates {
        input: Vec<f64>,
        forget: Vec<f64>,
        output: Vec<f64>,
        candidate: Vec<f64>,
    },
    CellState {
        c_prev: Vec<f64>,
        c: Vec<f64>,
    },
    Activation {
        a: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prediction: Option<Vec<f64>>,
    },
    Loss {
        loss: f64,
        predictions: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
    },
    Backward {
        d_activation: Vec<f64>,
        grad_norm: f64,
    },
    WeightsUpdated {
        /// Mean loss of the first batch.
        batch_loss: f64,
        /// Norm of the first batch's mean gradient before clipping.
        grad_norm: f64,
        batches: usize,
    },
    EpochDone(EpochReport),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEvent {
    pub index: usize,
    pub phase: Phase,
    pub detail: StepDetail,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<StepPayload>,
}

fn widen<S: Scalar>(v: &Vector<S>) -> Vec<f64> {
    v.to_f64_vec()
}

/// The event sequence of one epoch, plus everything needed to execute it.
#[derive(Debug, Clone)]
pub struct StepPlan<S: Scalar> {
    details: Vec<StepDetail>,
    cursor: usize,
    epoch: usize,
    data: Vec<Vec<Example<S>>>,
    rng_after: RngStream,
    started: Instant,
    state: NetworkState<S>,
    steps: Vec<Vec<CellStep<S>>>,
    pending: Option<CellStep<S>>,
    predictions: Vec<Vector<S>>,
    trace: Option<ForwardTrace<S>>,
    sweep: Option<BackwardSweep<S>>,
    grad_norms: Vec<Vec<f64>>,
    batch_losses: Vec<S>,
}

/// Lays out the next epoch of `session`. Draws the epoch's data without
/// consuming the session's stream; that happens at `weights_updated`.
pub fn compile_epoch_plan<S: Scalar>(session: &TrainingSession<S>) -> Result<StepPlan<S>, StepError> {
    if session.diverged {
        return Err(TrainError::Diverged.into());
    }
    let mut rng = session.rng.clone();
    let data = session.draw_epoch_data(&mut rng)?;
    let layers = session.params.layers.len();
    let timesteps = data[0][0].inputs.len();

    let mut details = Vec::with_capacity(5 * layers * timesteps + 3);
    for t in 1..=timesteps {
        for layer in 0..layers {
            details.extend([
                StepDetail::LayerInput { layer, t },
                StepDetail::GateActivations { layer, t },
                StepDetail::CellStateUpdate { layer, t },
                StepDetail::OutputActivation { layer, t },
            ]);
        }
    }
    details.push(StepDetail::LossComputed);
    for t in (1..=timesteps).rev() {
        for layer in (0..layers).rev() {
            details.push(StepDetail::BackwardStep { layer, t });
        }
    }
    details.push(StepDetail::WeightsUpdated);
    details.push(StepDetail::EpochDone);

    Ok(StepPlan {
        details,
        cursor: 0,
        epoch: session.epoch,
        data,
        rng_after: rng,
        started: Instant::now(),
        state: NetworkState::zeros(&session.params),
        steps: vec![Vec::with_capacity(timesteps); layers],
        pending: None,
        predictions: Vec::new(),
        trace: None,
        sweep: None,
        grad_norms: vec![vec![0.0; timesteps]; layers],
        batch_losses: Vec::new(),
    })
}

impl<S: Scalar> StepPlan<S> {
    pub fn len(&self) -> usize {
        self.details.len()
    }

    pub fn is_empty(&self) -> bool {
        self.details.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn is_finished(&self) -> bool {
        self.cursor == self.details.len()
    }

    /// The epoch this plan trains (zero-based count of epochs already done).
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn details(&self) -> &[StepDetail] {
        &self.details
    }

    /// The event the next [`advance`](Self::advance) will execute.
    pub fn next_detail(&self) -> Option<StepDetail> {
        self.details.get(self.cursor).copied()
    }

    /// The example animated by the micro-steps.
    pub fn visualized_example(&self) -> &Example<S> {
        &self.data[0][0]
    }

    /// Cell records of the visualized example computed so far, `[layer][t]`.
    pub fn forward_records(&self) -> &[Vec<CellStep<S>>] {
        match &self.trace {
            Some(trace) => &trace.steps,
            None => &self.steps,
        }
    }

    /// The cell currently between its first and last forward stage.
    pub fn pending_cell(&self) -> Option<&CellStep<S>> {
        self.pending.as_ref()
    }

    /// `‖∂L/∂a‖ [layer][t]` of the steps visited so far; zero elsewhere.
    pub fn grad_norms(&self) -> &[Vec<f64>] {
        &self.grad_norms
    }

    /// Index of the first event of `phase`, if any.
    pub fn phase_start(&self, phase: Phase) -> Option<usize> {
        self.details.iter().position(|d| d.phase() == phase)
    }

    fn weights_index(&self) -> usize {
        self.details.len() - 2
    }

    /// Executes the next event and returns it with its payload.
    pub fn advance(&mut self, session: &mut TrainingSession<S>) -> Result<StepEvent, StepError> {
        let detail = self.next_detail().ok_or(StepError::Finished)?;
        if session.epoch != self.epoch {
            return Err(StepError::StalePlan {
                plan: self.epoch,
                session: session.epoch,
            });
        }
        if session.diverged {
            return Err(TrainError::Diverged.into());
        }
        let payload = self.execute(detail, session)?;
        let event = StepEvent {
            index: self.cursor,
            phase: detail.phase(),
            detail,
            payload: Some(payload),
        };
        self.cursor += 1;
        if detail != StepDetail::EpochDone {
            session.phase = detail.phase();
        }
        Ok(event)
    }

    fn execute(
        &mut self,
        detail: StepDetail,
        session: &mut TrainingSession<S>,
    ) -> Result<StepPayload, StepError> {
        let params = &session.params;
        Ok(match detail {
            StepDetail::LayerInput { layer, t } => {
                let x = if layer == 0 {
                    self.data[0][0].inputs[t - 1].clone()
                } else {
                    self.steps[layer - 1][t - 1].a.clone()
                };
                let rec = CellStep::receive(
                    &params.layers[layer],
                    &x,
                    &self.state.a[layer],
                    &self.state.c[layer],
                )?;
                let payload = StepPayload::LayerInput {
                    x: widen(&rec.x),
                    a_prev: widen(&rec.a_prev),
                    c_prev: widen(&rec.c_prev),
                };
                self.pending = Some(rec);
                payload
            }
            StepDetail::GateActivations { layer, .. } => {
                let rec = self.pending.as_mut().expect("layer input received");
                rec.compute_gates(&params.layers[layer])?;
                StepPayload::Gates {
                    input: widen(&rec.i),
                    forget: widen(&rec.f),
                    output: widen(&rec.o),
                    candidate: widen(&rec.g),
                }
            }
            StepDetail::CellStateUpdate { .. } => {
                let rec = self.pending.as_mut().expect("layer input received");
                rec.update_cell_state();
                StepPayload::CellState {
                    c_prev: widen(&rec.c_prev),
                    c: widen(&rec.c),
                }
            }
            StepDetail::OutputActivation { layer, t } => {
                let mut rec = self.pending.take().expect("layer input received");
                rec.compute_output(&params.layers[layer])?;
                self.state.a[layer] = rec.a.clone();
                self.state.c[layer] = rec.c.clone();
                let example = &self.data[0][0];
                let first_readout = example.inputs.len() - example.horizon();
                let top = layer + 1 == params.layers.len();
                let prediction = if top && t - 1 >= first_readout {
                    let y = output_head(params, &rec.a)?;
                    let wide = widen(&y);
                    self.predictions.push(y);
                    Some(wide)
                } else {
                    None
                };
                let a = widen(&rec.a);
                self.steps[layer].push(rec);
                StepPayload::Activation { a, prediction }
            }
            StepDetail::LossComputed => {
                let example = &self.data[0][0];
                let first_readout = example.inputs.len() - example.horizon();
                let trace = ForwardTrace {
                    steps: std::mem::take(&mut self.steps),
                    predictions: std::mem::take(&mut self.predictions),
                    prediction_steps: (first_readout..example.inputs.len()).collect(),
                    final_states: self
                        .state
                        .a
                        .iter()
                        .cloned()
                        .zip(self.state.c.iter().cloned())
                        .collect(),
                };
                let sweep = BackwardSweep::new(&trace, params, session.loss_kind(), &example.targets)?;
                let payload = StepPayload::Loss {
                    loss: sweep.loss().as_f64(),
                    predictions: trace.predictions.iter().map(widen).collect(),
                    targets: example.targets.iter().map(widen).collect(),
                };
                self.trace = Some(trace);
                self.sweep = Some(sweep);
                payload
            }
            StepDetail::BackwardStep { .. } => {
                let trace = self.trace.as_ref().expect("loss computed");
                let sweep = self.sweep.as_mut().expect("loss computed");
                let step = sweep.step(trace, params)?;
                let grad_norm = step.grad_norm.as_f64();
                self.grad_norms[step.layer][step.t] = grad_norm;
                StepPayload::Backward {
                    d_activation: widen(&step.d_activation),
                    grad_norm,
                }
            }
            StepDetail::WeightsUpdated => self.update_weights(session)?,
            StepDetail::EpochDone => {
                let report = session.finish_epoch(&self.batch_losses, self.started)?;
                StepPayload::EpochDone(report)
            }
        })
    }

    fn update_weights(&mut self, session: &mut TrainingSession<S>) -> Result<StepPayload, StepError> {
        let trace = self.trace.take().expect("loss computed");
        let sweep = self.sweep.take().expect("loss computed");
        let first = sweep.finish(&trace, &session.params)?;
        self.trace = Some(trace);
        session.rng = self.rng_after.clone();
        session.last_grad_norms = norms_to_f64(&first.grad_norms);

        let kind = session.loss_kind();
        let (batch_loss, grad_norm) = session.train_batch(first, &self.data[0][1..])?;
        self.batch_losses.push(batch_loss);
        for batch in &self.data[1..] {
            let first = example_gradient(&session.params, &batch[0], kind)?;
            self.batch_losses.push(session.train_batch(first, &batch[1..])?.0);
        }
        Ok(StepPayload::WeightsUpdated {
            batch_loss: batch_loss.as_f64(),
            grad_norm: grad_norm.as_f64(),
            batches: self.data.len(),
        })
    }

    /// Runs events without reporting them until the next event belongs to
    /// `phase`. Returns the new cursor.
    ///
    /// Jumping to an earlier phase restarts the epoch's plan when no
    /// weights have been updated yet; otherwise the epoch is completed and
    /// the jump continues in the next epoch's plan.
    pub fn jump_to_phase(
        &mut self,
        session: &mut TrainingSession<S>,
        phase: Phase,
    ) -> Result<usize, StepError> {
        if self.next_detail().map(|d| d.phase()) == Some(phase) {
            return Ok(self.cursor);
        }
        let target = self.phase_start(phase).expect("every phase is in the plan");
        if target < self.cursor {
            if self.cursor <= self.weights_index() {
                *self = compile_epoch_plan(session)?;
            } else {
                self.run_to_end(session)?;
                *self = compile_epoch_plan(session)?;
            }
        }
        while self.cursor < target {
            self.advance(session)?;
        }
        Ok(self.cursor)
    }

    /// Executes every remaining event.
    pub fn run_to_end(&mut self, session: &mut TrainingSession<S>) -> Result<Option<EpochReport>, StepError> {
        let mut report = None;
        while !self.is_finished() {
            if let Some(StepPayload::EpochDone(r)) = self.advance(session)?.payload {
                report = Some(r);
            }
        }
        Ok(report)
    }
}

/// Converts wall-clock time into a number of due advances at a given pace.
#[derive(Debug, Clone, PartialEq)]
pub struct Pacer {
    steps_per_second: f64,
    playing: bool,
    /// Fractional steps carried between ticks.
    credit: f64,
}

impl Default for Pacer {
    fn default() -> Self {
        Self::new(2.0)
    }
}

impl Pacer {
    pub fn new(steps_per_second: f64) -> Self {
        Self {
            steps_per_second: steps_per_second.max(f64::MIN_POSITIVE),
            playing: false,
            credit: 0.0,
        }
    }

    /// Rejects non-positive or non-finite rates and leaves the pace unchanged.
    pub fn set_pace(&mut self, steps_per_second: f64) -> Result<(), String> {
        if !(steps_per_second > 0.0 && steps_per_second.is_finite()) {
            return Err(format!("pace must be a positive number of steps per second, got {steps_per_second}"));
        }
        self.steps_per_second = steps_per_second;
        Ok(())
    }

    pub fn pace(&self) -> f64 {
        self.steps_per_second
    }

    pub fn play(&mut self) {
        self.playing = true;
    }

    pub fn pause(&mut self) {
        self.playing = false;
        self.credit = 0.0;
    }

    pub fn is_playing(&self) -> bool {
        self.playing
    }

    /// Time until the next advance is due, while playing.
    pub fn until_next(&self) -> Option<Duration> {
        self.playing
            .then(|| Duration::from_secs_f64(((1.0 - self.credit) / self.steps_per_second).max(0.0)))
    }

    /// Advances the clock by `elapsed` and returns how many steps are due.
    pub fn tick(&mut self, elapsed: Duration) -> usize {
        if !self.playing {
            return 0;
        }
        self.credit += elapsed.as_secs_f64() * self.steps_per_second;
        // Tolerate float drift so that e.g. 10 ticks of 0.1 s at 1 step/s yield one step.
        let due = (self.credit + 1e-9).floor();
        self.credit = (self.credit - due).max(0.0);
        due as usize
    }
}

/// Runs one epoch of `session` through its plan, writing one JSON record
/// per event. Payloads are included only when asked for.
pub fn dump_epoch_trace<S: Scalar, W: Write>(
    session: &mut TrainingSession<S>,
    out: &mut W,
    with_payloads: bool,
) -> Result<Option<EpochReport>, StepError> {
    let mut plan = compile_epoch_plan(session)?;
    let mut report = None;
    while !plan.is_finished() {
        let mut event = plan.advance(session)?;
        if let Some(StepPayload::EpochDone(r)) = &event.payload {
            report = Some(r.clone());
        }
        if !with_payloads {
            event.payload = None;
        }
        serde_json::to_writer(&mut *out, &event).map_err(io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(report)
}
