//! Applies client commands to one session and produces snapshots.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use rnnscope_core::step::{compile_epoch_plan, Pacer, StepError, StepEvent};
use rnnscope_core::trainer::{ArchEdit, NetworkConfig, Phase, TrainError};
use rnnscope_core::{Plan, Session};
use thiserror::Error;

use crate::protocol::{Command, View};
use crate::snapshot::{CellView, PlanPosition, Snapshot};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error("layer {layer} does not exist in a {layers}-layer network")]
    NoSuchLayer { layer: usize, layers: usize },
    #[error("{0}")]
    Invalid(String),
}

static NEXT_SESSION: AtomicU64 = AtomicU64::new(1);

/// One client's session: the trainer, its in-flight epoch plan, and view state.
#[derive(Debug)]
pub struct SessionController {
    id: String,
    session: Session,
    plan: Option<Plan>,
    view: View,
    pacer: Pacer,
    last_event: Option<StepEvent>,
}

impl SessionController {
    pub fn new(config: NetworkConfig) -> Result<Self, TrainError> {
        Ok(Self {
            id: format!("session-{}", NEXT_SESSION.fetch_add(1, Ordering::Relaxed)),
            session: Session::new(config)?,
            plan: None,
            view: View::Overview,
            pacer: Pacer::default(),
            last_event: None,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn pacer(&self) -> &Pacer {
        &self.pacer
    }

    /// Applies one command. On error the session is left as it was.
    pub fn handle(&mut self, cmd: Command) -> Result<Vec<Snapshot>, CommandError> {
        match cmd {
            Command::Play => {
                self.ensure_trainable()?;
                self.pacer.play();
            }
            Command::Pause => self.pacer.pause(),
            Command::Step => return self.step().map(|s| vec![s]),
            Command::JumpPhase { phase } => {
                self.ensure_trainable()?;
                let mut plan = self.current_plan()?;
                let mut scratch = self.session.clone();
                plan.jump_to_phase(&mut scratch, phase)?;
                self.session = scratch;
                self.plan = Some(plan);
                self.last_event = None;
            }
            Command::Reset => {
                self.session.reset()?;
                self.clear_plan();
                self.pacer.pause();
            }
            Command::SetParam { name, value } => self.session.set_hyperparam(name, value)?,
            Command::EditArch { action } => {
                let edit = action.resolve(self.session.config.layer_count);
                self.edit(edit)?;
            }
            Command::SelectTask { task } => self.edit(ArchEdit::SetTask { task })?,
            Command::SetView { view } => {
                self.check_view(view)?;
                self.view = view;
            }
            Command::SetPace { rate } => self.pacer.set_pace(rate).map_err(CommandError::Invalid)?,
        }
        Ok(vec![self.snapshot()])
    }

    fn edit(&mut self, edit: ArchEdit) -> Result<(), CommandError> {
        self.session.edit_architecture(edit)?;
        self.clear_plan();
        if let View::Cell { layer } = self.view {
            if layer >= self.session.config.layer_count {
                self.view = View::Cell {
                    layer: self.session.config.layer_count - 1,
                };
            }
        }
        Ok(())
    }

    fn clear_plan(&mut self) {
        self.plan = None;
        self.last_event = None;
    }

    fn check_view(&self, view: View) -> Result<(), CommandError> {
        if let View::Cell { layer } = view {
            let layers = self.session.config.layer_count;
            if layer >= layers {
                return Err(CommandError::NoSuchLayer { layer, layers });
            }
        }
        Ok(())
    }

    fn ensure_trainable(&self) -> Result<(), CommandError> {
        if self.session.diverged {
            return Err(TrainError::Diverged.into());
        }
        Ok(())
    }

    /// The in-flight plan, or a fresh one when none is open.
    fn current_plan(&self) -> Result<Plan, CommandError> {
        match &self.plan {
            Some(p) if !p.is_finished() => Ok(p.clone()),
            _ => Ok(compile_epoch_plan(&self.session)?),
        }
    }

    /// Overview: completes one epoch. Cell view: executes one micro-step.
    pub fn step(&mut self) -> Result<Snapshot, CommandError> {
        self.ensure_trainable()?;
        let mut plan = self.current_plan()?;
        let mut scratch = self.session.clone();
        let outcome = match self.view {
            View::Overview => plan.run_to_end(&mut scratch).map(|_| None),
            View::Cell { .. } => plan.advance(&mut scratch).map(Some),
        };
        match outcome {
            Ok(event) => self.last_event = event,
            Err(e) => {
                // Divergence is reported through the session flag; nothing else changes.
                self.session.diverged |= scratch.diverged;
                return Err(e.into());
            }
        }
        self.session = scratch;
        self.plan = Some(plan);
        Ok(self.snapshot())
    }

    /// Advances by however many steps the pacer says are due after
    /// `elapsed`, returning one snapshot per step. Stops and pauses on error.
    pub fn tick(&mut self, elapsed: Duration) -> Result<Vec<Snapshot>, CommandError> {
        let due = self.pacer.tick(elapsed);
        let mut out = Vec::with_capacity(due);
        for _ in 0..due {
            match self.step() {
                Ok(s) => out.push(s),
                Err(e) => {
                    self.pacer.pause();
                    return Err(e);
                }
            }
        }
        Ok(out)
    }

    pub fn snapshot(&self) -> Snapshot {
        let s = &self.session;
        let plan = self.plan.as_ref().filter(|p| p.epoch() == s.epoch && !p.is_finished());
        let grad_norms = match plan {
            Some(p) if p.next_detail().is_some_and(|d| d.phase() == Phase::Training) => p.grad_norms().to_vec(),
            _ => s.last_grad_norms.clone(),
        };
        let cell = match (self.view, plan) {
            (View::Cell { layer }, Some(p)) => focused_cell(p, layer),
            _ => None,
        };
        Snapshot {
            session_id: self.id.clone(),
            epoch: s.epoch,
            phase: s.phase,
            view: self.view,
            config: s.config.clone(),
            loss_history: s.loss_history.clone(),
            validation: s.last_validation.clone(),
            event: match self.view {
                View::Cell { .. } => self.last_event.clone(),
                View::Overview => None,
            },
            cell,
            grad_norms,
            plan: plan.map(|p| PlanPosition {
                cursor: p.cursor(),
                len: p.len(),
            }),
            playing: self.pacer.is_playing(),
            pace: self.pacer.pace(),
            diverged: s.diverged,
        }
    }
}

fn focused_cell(plan: &Plan, layer: usize) -> Option<CellView> {
    if let (Some(pending), Some(rnnscope_core::StepDetail::GateActivations { layer: l, t }
    | rnnscope_core::StepDetail::CellStateUpdate { layer: l, t }
    | rnnscope_core::StepDetail::OutputActivation { layer: l, t })) = (plan.pending_cell(), plan.next_detail())
    {
        if l == layer {
            return Some(CellView::from_step(layer, t, false, pending));
        }
    }
    let records = plan.forward_records().get(layer)?;
    let last = records.last()?;
    Some(CellView::from_step(layer, records.len(), true, last))
}
