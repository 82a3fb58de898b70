//! Self-contained picture of everything a client can display.

use rnnscope_core::cells::CellStep;
use rnnscope_core::step::StepEvent;
use rnnscope_core::trainer::{LossRecord, NetworkConfig, Phase, ValidationView};
use serde::{Deserialize, Serialize};

use crate::protocol::View;

/// Intermediates of one cell at one timestep. Gate, candidate and cell
/// state vectors are empty for vanilla cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellView {
    pub layer: usize,
    /// One-based timestep.
    pub t: usize,
    /// Whether all four forward stages of this cell have run.
    pub complete: bool,
    pub input: Vec<f64>,
    pub previous_activation: Vec<f64>,
    pub previous_cell_state: Vec<f64>,
    pub input_gate: Vec<f64>,
    pub forget_gate: Vec<f64>,
    pub output_gate: Vec<f64>,
    pub candidate: Vec<f64>,
    pub cell_state: Vec<f64>,
    pub activation: Vec<f64>,
}

impl CellView {
    pub fn from_step<S: rnnscope_core::Scalar>(layer: usize, t: usize, complete: bool, step: &CellStep<S>) -> Self {
        Self {
            layer,
            t,
            complete,
            input: step.x.to_f64_vec(),
            previous_activation: step.a_prev.to_f64_vec(),
            previous_cell_state: step.c_prev.to_f64_vec(),
            input_gate: step.i.to_f64_vec(),
            forget_gate: step.f.to_f64_vec(),
            output_gate: step.o.to_f64_vec(),
            candidate: step.g.to_f64_vec(),
            cell_state: step.c.to_f64_vec(),
            activation: step.a.to_f64_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanPosition {
    pub cursor: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub session_id: String,
    pub epoch: usize,
    pub phase: Phase,
    pub view: View,
    pub config: NetworkConfig,
    pub loss_history: Vec<LossRecord>,
    /// Held-out prediction of the latest finished epoch.
    pub validation: Option<ValidationView>,
    /// The micro-step just executed, in cell view.
    pub event: Option<StepEvent>,
    /// Focused layer's latest cell computation, in cell view.
    pub cell: Option<CellView>,
    /// `‖∂L/∂a‖ [layer][t]` of the visualized example.
    pub grad_norms: Vec<Vec<f64>>,
    pub plan: Option<PlanPosition>,
    pub playing: bool,
    pub pace: f64,
    pub diverged: bool,
}

impl Snapshot {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("snapshot serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}
