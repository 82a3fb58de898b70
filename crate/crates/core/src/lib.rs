//! Stepwise-observable recurrent network training engine.
//!
//! Trains vanilla RNN and LSTM networks on periodic functions and
//! character corpora, recording every gate, cell state and gradient so a
//! client can watch training one compute step at a time.

pub mod bptt;
pub mod cells;
pub mod data;
pub mod math;
pub mod optim;
pub mod scalar;
pub mod step;
pub mod trainer;

pub use scalar::Scalar;

pub use bptt::{BackwardResult, Example, GradientSet, LossKind};
pub use cells::{Architecture, CellKind, ForwardTrace, ParameterSet};
pub use data::Task;
pub use math::{Matrix, RngStream, Vector};
pub use step::{compile_epoch_plan, Pacer, StepDetail, StepEvent, StepPayload, StepPlan};
pub use trainer::{EpochReport, NetworkConfig, Phase, TrainError, TrainingSession};

/// Double-precision session, the default for interactive and CLI use.
pub type Session = TrainingSession<f64>;
/// Single-precision session.
pub type SessionF32 = TrainingSession<f32>;
pub type Plan = StepPlan<f64>;
pub type Params = ParameterSet<f64>;
pub type Matrix64 = Matrix<f64>;
pub type Vector64 = Vector<f64>;
