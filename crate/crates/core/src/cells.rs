//! Vanilla RNN and LSTM cells, layer stacking, the readout head and
//! free-running prediction.
//!
//! Every forward computation produces a [`CellStep`] record holding all of
//! its intermediates. A cell step is computed in four stages that mirror
//! the stages a learner watches in the cell view: receive the layer input,
//! compute the gate activations, update the cell state, emit the
//! activation. The step machine drives these stages one at a time; the
//! one-shot functions here run them back to back, so both paths produce
//! bit-identical records.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{init_params, sigmoid_scalar, InitScheme, Matrix, MathError, RngStream, Vector};
use crate::scalar::Scalar;

pub const MAX_LAYERS: usize = 7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("input sequence is empty")]
    EmptyInput,
    #[error("layer count must be within 1..={MAX_LAYERS}, got {0}")]
    LayerCount(usize),
    #[error("{what}: expected length {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("prediction horizon must be within 1..={max}, got {got}")]
    Horizon { max: usize, got: usize },
    #[error("free-running feedback needs matching input and output sizes ({input} vs {output})")]
    FeedbackShape { input: usize, output: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Vanilla,
    Lstm,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Vanilla => "vanilla",
            CellKind::Lstm => "lstm",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CellKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vanilla" | "rnn" => Ok(CellKind::Vanilla),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(format!("unknown cell kind `{other}`")),
        }
    }
}

/// One affine branch `W_x·x + W_a·a_prev + b` of a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct GateWeights<S> {
    pub w_x: Matrix<S>,
    pub w_a: Matrix<S>,
    pub b: Vector<S>,
}

impl<S: Scalar> GateWeights<S> {
    pub fn cast<T: Scalar>(&self) -> GateWeights<T> {
        GateWeights {
            w_x: self.w_x.cast(),
            w_a: self.w_a.cast(),
            b: self.b.cast(),
        }
    }

    fn init(
        hidden: usize,
        input_dim: usize,
        bias: f64,
        scheme: InitScheme,
        rng: &mut RngStream,
    ) -> Result<Self, MathError> {
        Ok(Self {
            w_x: init_params(hidden, input_dim, scheme, rng)?,
            w_a: init_params(hidden, hidden, scheme, rng)?,
            b: Vector::new(vec![S::of(bias); hidden]),
        })
    }

    fn zeros(hidden: usize, input_dim: usize) -> Self {
        Self {
            w_x: Matrix::zeros(hidden, input_dim),
            w_a: Matrix::zeros(hidden, hidden),
            b: Vector::zeros(hidden),
        }
    }

    pub fn pre_activation(&self, x: &[S], a_prev: &[S]) -> Result<Vector<S>, MathError> {
        let mut z = self.w_x.mul_vec(x)?;
        let r = self.w_a.mul_vec(a_prev)?;
        for ((z, r), b) in z.iter_mut().zip(r.iter()).zip(self.b.iter()) {
            *z = *z + *r + *b;
        }
        Ok(z)
    }

    pub fn hidden(&self) -> usize {
        self.w_x.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.cols()
    }

    fn slices(&self) -> [&[S]; 3] {
        [self.w_x.as_slice(), self.w_a.as_slice(), &self.b]
    }

    fn slices_mut(&mut self) -> [&mut [S]; 3] {
        [self.w_x.as_mut_slice(), self.w_a.as_mut_slice(), &mut self.b]
    }
}

/// Weights of one LSTM cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct LstmWeights<S> {
    pub input: GateWeights<S>,
    pub forget: GateWeights<S>,
    pub output: GateWeights<S>,
    /// The tanh branch proposing new cell-state content.
    pub candidate: GateWeights<S>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", rename_all = "snake_case")]
pub enum CellParams<S> {
    Vanilla(GateWeights<S>),
    Lstm(LstmWeights<S>),
}

impl<S: Scalar> CellParams<S> {
    pub fn cast<T: Scalar>(&self) -> CellParams<T> {
        match self {
            CellParams::Vanilla(w) => CellParams::Vanilla(w.cast()),
            CellParams::Lstm(w) => CellParams::Lstm(LstmWeights {
                input: w.input.cast(),
                forget: w.forget.cast(),
                output: w.output.cast(),
                candidate: w.candidate.cast(),
            }),
        }
    }

    pub fn kind(&self) -> CellKind {
        match self {
            CellParams::Vanilla(_) => CellKind::Vanilla,
            CellParams::Lstm(_) => CellKind::Lstm,
        }
    }

    /// Gate blocks in a fixed order: the single branch for vanilla,
    /// input/forget/output/candidate for LSTM.
    pub fn gates(&self) -> Vec<&GateWeights<S>> {
        match self {
            CellParams::Vanilla(w) => vec![w],
            CellParams::Lstm(l) => vec![&l.input, &l.forget, &l.output, &l.candidate],
        }
    }

    pub fn gates_mut(&mut self) -> Vec<&mut GateWeights<S>> {
        match self {
            CellParams::Vanilla(w) => vec![w],
            CellParams::Lstm(l) => vec![&mut l.input, &mut l.forget, &mut l.output, &mut l.candidate],
        }
    }

    pub fn hidden(&self) -> usize {
        self.gates()[0].hidden()
    }

    pub fn input_dim(&self) -> usize {
        self.gates()[0].input_dim()
    }

    fn zeros(kind: CellKind, hidden: usize, input_dim: usize) -> Self {
        match kind {
            CellKind::Vanilla => CellParams::Vanilla(GateWeights::zeros(hidden, input_dim)),
            CellKind::Lstm => CellParams::Lstm(LstmWeights {
                input: GateWeights::zeros(hidden, input_dim),
                forget: GateWeights::zeros(hidden, input_dim),
                output: GateWeights::zeros(hidden, input_dim),
                candidate: GateWeights::zeros(hidden, input_dim),
            }),
        }
    }
}

/// Shape and initialization of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub cell_kind: CellKind,
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub output_dim: usize,
    pub init: InitScheme,
    /// Initial value of every forget-gate bias.
    pub forget_bias: f64,
}

/// All weights and biases of a network: the stacked cells plus the affine readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct ParameterSet<S> {
    pub layers: Vec<CellParams<S>>,
    pub head_w: Matrix<S>,
    pub head_b: Vector<S>,
}

impl<S: Scalar> ParameterSet<S> {
    /// The same network at another precision.
    pub fn cast<T: Scalar>(&self) -> ParameterSet<T> {
        ParameterSet {
            layers: self.layers.iter().map(CellParams::cast).collect(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }

    pub fn init(arch: &Architecture, rng: &mut RngStream) -> Result<Self, ModelError> {
        if arch.layers == 0 || arch.layers > MAX_LAYERS {
            return Err(ModelError::LayerCount(arch.layers));
        }
        let mut layers = Vec::with_capacity(arch.layers);
        for l in 0..arch.layers {
            let input_dim = if l == 0 { arch.input_dim } else { arch.hidden };
            let h = arch.hidden;
            let cell = match arch.cell_kind {
                CellKind::Vanilla => {
                    CellParams::Vanilla(GateWeights::init(h, input_dim, 0.0, arch.init, rng)?)
                }
                CellKind::Lstm => CellParams::Lstm(LstmWeights {
                    input: GateWeights::init(h, input_dim, 0.0, arch.init, rng)?,
                    forget: GateWeights::init(h, input_dim, arch.forget_bias, arch.init, rng)?,
                    output: GateWeights::init(h, input_dim, 0.0, arch.init, rng)?,
                    candidate: GateWeights::init(h, input_dim, 0.0, arch.init, rng)?,
                }),
            };
            layers.push(cell);
        }
        Ok(Self {
            layers,
            head_w: init_params(arch.output_dim, arch.hidden, arch.init, rng)?,
            head_b: Vector::zeros(arch.output_dim),
        })
    }

    /// All-zero parameters with the shape of `arch`.
    pub fn zeros(arch: &Architecture) -> Self {
        let layers = (0..arch.layers)
            .map(|l| {
                let input_dim = if l == 0 { arch.input_dim } else { arch.hidden };
                CellParams::zeros(arch.cell_kind, arch.hidden, input_dim)
            })
            .collect();
        Self {
            layers,
            head_w: Matrix::zeros(arch.output_dim, arch.hidden),
            head_b: Vector::zeros(arch.output_dim),
        }
    }

    /// Zeros with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_slice_mut(|s| s.iter_mut().for_each(|v| *v = S::zero()));
        z
    }

    pub fn cell_kind(&self) -> CellKind {
        self.layers[0].kind()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.head_w.rows()
    }

    /// Parameter blocks in canonical order: layers bottom-up, gates in
    /// order, `W_x`, `W_a`, `b` per gate, then head weights and head bias.
    pub fn slices(&self) -> Vec<&[S]> {
        let mut out = Vec::new();
        for cell in &self.layers {
            for g in cell.gates() {
                out.extend(g.slices());
            }
        }
        out.push(self.head_w.as_slice());
        out.push(&self.head_b);
        out
    }

    pub fn for_each_slice_mut(&mut self, mut f: impl FnMut(&mut [S])) {
        for cell in &mut self.layers {
            for g in cell.gates_mut() {
                for s in g.slices_mut() {
                    f(s);
                }
            }
        }
        f(self.head_w.as_mut_slice());
        f(&mut self.head_b);
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [S]> {
        let mut out: Vec<&mut [S]> = Vec::new();
        for cell in &mut self.layers {
            for g in cell.gates_mut() {
                out.extend(g.slices_mut());
            }
        }
        out.push(self.head_w.as_mut_slice());
        out.push(&mut self.head_b);
        out
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Exact byte image of every parameter, for equality and hashing.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .flat_map(|v| v.as_f64().to_bits().to_le_bytes())
            .collect()
    }

    /// Checks that layer shapes chain and the head matches the top layer.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers.is_empty() || self.layers.len() > MAX_LAYERS {
            return Err(ModelError::LayerCount(self.layers.len()));
        }
        for pair in self.layers.windows(2) {
            if pair[1].input_dim() != pair[0].hidden() {
                return Err(ModelError::Length {
                    what: "stacked layer input",
                    expected: pair[0].hidden(),
                    got: pair[1].input_dim(),
                });
            }
        }
        let top = self.layers.last().expect("non-empty").hidden();
        if self.head_w.cols() != top {
            return Err(ModelError::Length {
                what: "head input",
                expected: top,
                got: self.head_w.cols(),
            });
        }
        if self.head_b.len() != self.head_w.rows() {
            return Err(ModelError::Length {
                what: "head bias",
                expected: self.head_w.rows(),
                got: self.head_b.len(),
            });
        }
        Ok(())
    }
}

/// Everything one cell computed at one timestep.
///
/// For vanilla cells the gate, candidate and cell-state fields stay empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct CellStep<S> {
    pub x: Vector<S>,
    pub a_prev: Vector<S>,
    pub c_prev: Vector<S>,
    pub i: Vector<S>,
    pub f: Vector<S>,
    pub o: Vector<S>,
    /// Candidate `tanh(W_cx·x + W_ca·a_prev + b_c)`.
    pub g: Vector<S>,
    pub c: Vector<S>,
    pub a: Vector<S>,
}

impl<S: Scalar> CellStep<S> {
    /// Stage 1: receive the layer input. Checks all dimensions up front.
    pub fn receive(
        params: &CellParams<S>,
        x: &Vector<S>,
        a_prev: &Vector<S>,
        c_prev: &Vector<S>,
    ) -> Result<Self, ModelError> {
        let hidden = params.hidden();
        check_len("layer input", params.input_dim(), x.len())?;
        check_len("previous activation", hidden, a_prev.len())?;
        if params.kind() == CellKind::Lstm {
            check_len("previous cell state", hidden, c_prev.len())?;
        }
        Ok(Self {
            x: x.clone(),
            a_prev: a_prev.clone(),
            c_prev: if params.kind() == CellKind::Lstm {
                c_prev.clone()
            } else {
                Vector::default()
            },
            i: Vector::default(),
            f: Vector::default(),
            o: Vector::default(),
            g: Vector::default(),
            c: Vector::default(),
            a: Vector::default(),
        })
    }

    /// Stage 2: gate activations and candidate (LSTM only).
    pub fn compute_gates(&mut self, params: &CellParams<S>) -> Result<(), ModelError> {
        if let CellParams::Lstm(w) = params {
            let gate = |g: &GateWeights<S>| -> Result<Vector<S>, MathError> {
                Ok(g.pre_activation(&self.x, &self.a_prev)?.map(sigmoid_scalar))
            };
            let i = gate(&w.input)?;
            let f = gate(&w.forget)?;
            let o = gate(&w.output)?;
            let g = w.candidate.pre_activation(&self.x, &self.a_prev)?.map(|v| v.tanh());
            self.i = i;
            self.f = f;
            self.o = o;
            self.g = g;
        }
        Ok(())
    }

    /// Stage 3: `c = f∘c_prev + i∘g` (LSTM only).
    pub fn update_cell_state(&mut self) {
        if self.i.is_empty() {
            return;
        }
        self.c = Vector::new(
            (0..self.i.len())
                .map(|k| self.f[k] * self.c_prev[k] + self.i[k] * self.g[k])
                .collect(),
        );
    }

    /// Stage 4: the output activation.
    pub fn compute_output(&mut self, params: &CellParams<S>) -> Result<(), ModelError> {
        self.a = match params {
            CellParams::Vanilla(w) => w.pre_activation(&self.x, &self.a_prev)?.map(|v| v.tanh()),
            CellParams::Lstm(_) => Vector::new(
                self.o
                    .iter()
                    .zip(self.c.iter())
                    .map(|(&o, &c)| o * c.tanh())
                    .collect(),
            ),
        };
        Ok(())
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), ModelError> {
    if expected != got {
        return Err(ModelError::Length {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// Runs all four stages of one cell.
pub fn cell_step<S: Scalar>(
    params: &CellParams<S>,
    x: &Vector<S>,
    a_prev: &Vector<S>,
    c_prev: &Vector<S>,
) -> Result<CellStep<S>, ModelError> {
    let mut step = CellStep::receive(params, x, a_prev, c_prev)?;
    step.compute_gates(params)?;
    step.update_cell_state();
    step.compute_output(params)?;
    Ok(step)
}

/// `a = tanh(W_ax·x + W_aa·a_prev + b_a)`.
pub fn vanilla_step<S: Scalar>(
    params: &GateWeights<S>,
    x: &Vector<S>,
    a_prev: &Vector<S>,
) -> Result<CellStep<S>, ModelError> {
    cell_step(&CellParams::Vanilla(params.clone()), x, a_prev, &Vector::default())
}

pub fn lstm_step<S: Scalar>(
    params: &LstmWeights<S>,
    x: &Vector<S>,
    a_prev: &Vector<S>,
    c_prev: &Vector<S>,
) -> Result<CellStep<S>, ModelError> {
    cell_step(&CellParams::Lstm(params.clone()), x, a_prev, c_prev)
}

/// Affine readout `head_w·a + head_b`.
pub fn output_head<S: Scalar>(params: &ParameterSet<S>, a: &Vector<S>) -> Result<Vector<S>, ModelError> {
    let y = params.head_w.mul_vec(a)?;
    Ok(y.add(&params.head_b)?)
}

/// Recurrent state of every layer between timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState<S> {
    pub a: Vec<Vector<S>>,
    pub c: Vec<Vector<S>>,
}

impl<S: Scalar> NetworkState<S> {
    /// `a⁰ = c⁰ = 0` for every layer.
    pub fn zeros(params: &ParameterSet<S>) -> Self {
        let a = params.layers.iter().map(|l| Vector::zeros(l.hidden())).collect();
        let c = params
            .layers
            .iter()
            .map(|l| match l.kind() {
                CellKind::Lstm => Vector::zeros(l.hidden()),
                CellKind::Vanilla => Vector::default(),
            })
            .collect();
        Self { a, c }
    }

    /// Advances every layer by one timestep, returning the per-layer records.
    pub fn step(
        &mut self,
        params: &ParameterSet<S>,
        x: &Vector<S>,
    ) -> Result<Vec<CellStep<S>>, ModelError> {
        let mut records = Vec::with_capacity(params.layers.len());
        let mut input = x.clone();
        for (l, cell) in params.layers.iter().enumerate() {
            let rec = cell_step(cell, &input, &self.a[l], &self.c[l])?;
            self.a[l] = rec.a.clone();
            self.c[l] = rec.c.clone();
            input = rec.a.clone();
            records.push(rec);
        }
        Ok(records)
    }
}

/// Record of a forward pass over a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct ForwardTrace<S> {
    /// `steps[layer][t]`.
    pub steps: Vec<Vec<CellStep<S>>>,
    /// Readouts, one per emitting timestep.
    pub predictions: Vec<Vector<S>>,
    /// Zero-based timesteps at which `predictions` were read out.
    pub prediction_steps: Vec<usize>,
    /// Final `(a, c)` of every layer.
    pub final_states: Vec<(Vector<S>, Vector<S>)>,
}

impl<S: Scalar> ForwardTrace<S> {
    pub fn layers(&self) -> usize {
        self.steps.len()
    }

    pub fn timesteps(&self) -> usize {
        self.steps.first().map_or(0, |s| s.len())
    }

    /// The last readout.
    pub fn prediction(&self) -> &Vector<S> {
        self.predictions.last().expect("trace has a prediction")
    }
}

/// Forward pass that reads out the head after the final timestep only.
pub fn forward_sequence<S: Scalar>(
    params: &ParameterSet<S>,
    inputs: &[Vector<S>],
) -> Result<ForwardTrace<S>, ModelError> {
    forward_with_horizon(params, inputs, 1)
}

/// Forward pass that reads out the head at each of the last `horizon` timesteps.
pub fn forward_with_horizon<S: Scalar>(
    params: &ParameterSet<S>,
    inputs: &[Vector<S>],
    horizon: usize,
) -> Result<ForwardTrace<S>, ModelError> {
    if inputs.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if horizon == 0 || horizon > inputs.len() {
        return Err(ModelError::Horizon {
            max: inputs.len(),
            got: horizon,
        });
    }
    params.validate()?;
    let first_readout = inputs.len() - horizon;
    let mut state = NetworkState::zeros(params);
    let mut steps: Vec<Vec<CellStep<S>>> = vec![Vec::with_capacity(inputs.len()); params.layers.len()];
    let mut predictions = Vec::with_capacity(horizon);
    for (t, x) in inputs.iter().enumerate() {
        let records = state.step(params, x)?;
        if t >= first_readout {
            predictions.push(output_head(params, &records.last().expect("layers").a)?);
        }
        for (l, rec) in records.into_iter().enumerate() {
            steps[l].push(rec);
        }
    }
    Ok(ForwardTrace {
        steps,
        predictions,
        prediction_steps: (first_readout..inputs.len()).collect(),
        final_states: state.a.into_iter().zip(state.c).collect(),
    })
}

/// How a free-running prediction becomes the next input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    /// Feed the predicted value itself.
    Value,
    /// Feed the one-hot of the highest-scoring class.
    ArgmaxOneHot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreeRun<S> {
    pub predictions: Vec<Vector<S>>,
    /// Trace over the seed window and every fed-back step.
    pub trace: ForwardTrace<S>,
}

/// Builds state over `seed_window`, then predicts `k` steps ahead, feeding
/// each prediction back as the next input.
pub fn free_run<S: Scalar>(
    params: &ParameterSet<S>,
    seed_window: &[Vector<S>],
    k: usize,
    feedback: Feedback,
) -> Result<FreeRun<S>, ModelError> {
    if seed_window.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if k == 0 {
        return Err(ModelError::Horizon { max: usize::MAX, got: 0 });
    }
    params.validate()?;
    if k > 1 && params.input_dim() != params.output_dim() {
        return Err(ModelError::FeedbackShape {
            input: params.input_dim(),
            output: params.output_dim(),
        });
    }
    let mut state = NetworkState::zeros(params);
    let mut steps: Vec<Vec<CellStep<S>>> = vec![Vec::new(); params.layers.len()];
    let mut push = |records: Vec<CellStep<S>>| {
        for (l, rec) in records.into_iter().enumerate() {
            steps[l].push(rec);
        }
    };
    let mut last_a = Vector::default();
    for x in seed_window {
        let records = state.step(params, x)?;
        last_a = records.last().expect("layers").a.clone();
        push(records);
    }
    let mut predictions = Vec::with_capacity(k);
    let mut prediction_steps = Vec::with_capacity(k);
    let mut t = seed_window.len() - 1;
    loop {
        let y = output_head(params, &last_a)?;
        prediction_steps.push(t);
        predictions.push(y.clone());
        if predictions.len() == k {
            break;
        }
        let next = match feedback {
            Feedback::Value => y,
            Feedback::ArgmaxOneHot => Vector::one_hot(y.len(), y.argmax().unwrap_or(0)),
        };
        let records = state.step(params, &next)?;
        last_a = records.last().expect("layers").a.clone();
        push(records);
        t += 1;
    }
    Ok(FreeRun {
        trace: ForwardTrace {
            steps,
            predictions: predictions.clone(),
            prediction_steps,
            final_states: state.a.into_iter().zip(state.c).collect(),
        },
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Vector<f64> {
        Vector::from_f64(xs)
    }

    fn arch(kind: CellKind, input: usize, hidden: usize, layers: usize, output: usize) -> Architecture {
        Architecture {
            cell_kind: kind,
            input_dim: input,
            hidden,
            layers,
            output_dim: output,
            init: InitScheme::GlorotUniform,
            forget_bias: 1.0,
        }
    }

    fn scalar_gate(w_x: f64, w_a: f64, b: f64) -> GateWeights<f64> {
        GateWeights {
            w_x: Matrix::from_rows(&[&[w_x]]).unwrap(),
            w_a: Matrix::from_rows(&[&[w_a]]).unwrap(),
            b: v(&[b]),
        }
    }

    #[test]
    fn vanilla_examples() {
        let zero = GateWeights::<f64>::zeros(3, 2);
        let s = vanilla_step(&zero, &v(&[1.0, -2.0]), &v(&[0.3, 0.1, 0.2])).unwrap();
        assert_eq!(s.a, v(&[0.0, 0.0, 0.0]));
        assert!(s.c.is_empty() && s.i.is_empty());

        let pass = scalar_gate(1.0, 0.0, 0.0);
        let s = vanilla_step(&pass, &v(&[0.5]), &v(&[0.9])).unwrap();
        assert_eq!(s.a[0], 0.5f64.tanh());
    }

    #[test]
    fn vanilla_matches_formula_oracle() {
        let mut rng = RngStream::new(42);
        let w = GateWeights::<f64>::init(2, 1, 0.0, InitScheme::GlorotUniform, &mut rng).unwrap();
        let w = GateWeights { b: v(&[0.25, -0.4]), ..w };
        let s = vanilla_step(&w, &v(&[1.0]), &v(&[0.1, 0.1])).unwrap();
        for r in 0..2 {
            let z = w.w_x.get(r, 0) * 1.0 + w.w_a.get(r, 0) * 0.1 + w.w_a.get(r, 1) * 0.1 + w.b[r];
            assert!((s.a[r] - z.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn vanilla_rejects_bad_dims() {
        let w = GateWeights::<f64>::zeros(2, 1);
        assert!(matches!(
            vanilla_step(&w, &v(&[1.0, 2.0]), &v(&[0.0, 0.0])),
            Err(ModelError::Length { .. })
        ));
        assert!(vanilla_step(&w, &v(&[1.0]), &v(&[0.0])).is_err());
    }

    fn zero_lstm() -> LstmWeights<f64> {
        LstmWeights {
            input: scalar_gate(0.0, 0.0, 0.0),
            forget: scalar_gate(0.0, 0.0, 0.0),
            output: scalar_gate(0.0, 0.0, 0.0),
            candidate: scalar_gate(0.0, 0.0, 0.0),
        }
    }

    #[test]
    fn lstm_zero_params() {
        let s = lstm_step(&zero_lstm(), &v(&[0.7]), &v(&[0.0]), &v(&[0.0])).unwrap();
        assert_eq!((s.i[0], s.f[0], s.o[0]), (0.5, 0.5, 0.5));
        assert_eq!((s.g[0], s.c[0], s.a[0]), (0.0, 0.0, 0.0));

        let s = lstm_step(&zero_lstm(), &v(&[0.7]), &v(&[0.0]), &v(&[1.0])).unwrap();
        assert_eq!(s.c[0], 0.5);
        assert!((s.a[0] - 0.23105).abs() < 1e-5);
        assert_eq!(s.a[0], 0.5 * 0.5f64.tanh());
    }

    #[test]
    fn lstm_perfect_memory() {
        let mut w = zero_lstm();
        w.forget.b = v(&[60.0]);
        w.input.b = v(&[-60.0]);
        let s = lstm_step(&w, &v(&[0.9]), &v(&[0.2]), &v(&[0.37])).unwrap();
        assert!((s.c[0] - 0.37).abs() < 1e-12);
    }

    #[test]
    fn perfect_memory_over_long_sequence() {
        let mut rng = RngStream::new(3);
        let mut p: ParameterSet<f64> = ParameterSet::init(&arch(CellKind::Lstm, 1, 3, 1, 1), &mut rng).unwrap();
        if let CellParams::Lstm(w) = &mut p.layers[0] {
            w.forget.b = v(&[60.0; 3]);
            w.input.b = v(&[-60.0; 3]);
        }
        let inputs: Vec<_> = (0..200).map(|t| v(&[(t as f64 * 0.3).sin()])).collect();
        let trace = forward_sequence(&p, &inputs).unwrap();
        // c⁰ = 0, so the state must stay at zero.
        for step in &trace.steps[0] {
            assert!(step.c.iter().all(|c| c.abs() < 1e-9));
        }
    }

    #[test]
    fn forward_shapes() {
        let mut rng = RngStream::new(1);
        let p1: ParameterSet<f64> = ParameterSet::init(&arch(CellKind::Lstm, 1, 4, 1, 1), &mut rng).unwrap();
        let t = forward_sequence(&p1, &[v(&[0.5])]).unwrap();
        assert_eq!((t.layers(), t.timesteps()), (1, 1));
        let want = output_head(&p1, &t.steps[0][0].a).unwrap();
        assert_eq!(t.prediction(), &want);

        let p2: ParameterSet<f64> = ParameterSet::init(&arch(CellKind::Vanilla, 1, 4, 2, 1), &mut rng).unwrap();
        let t = forward_sequence(&p2, &[v(&[0.1]), v(&[0.2]), v(&[0.3])]).unwrap();
        assert_eq!((t.layers(), t.timesteps()), (2, 3));
        assert!(matches!(forward_sequence(&p2, &[]), Err(ModelError::EmptyInput)));
    }

    #[test]
    fn dead_network_predicts_zero() {
        let p = ParameterSet::<f64>::zeros(&arch(CellKind::Lstm, 1, 5, 1, 1));
        let t = forward_sequence(&p, &[v(&[3.0]), v(&[-1.0])]).unwrap();
        assert_eq!(t.prediction(), &v(&[0.0]));
        let run = free_run(&p, &[v(&[3.0])], 4, Feedback::Value).unwrap();
        assert_eq!(run.predictions, vec![v(&[0.0]); 4]);
    }

    #[test]
    fn output_head_examples() {
        let mut p = ParameterSet::<f64>::zeros(&arch(CellKind::Vanilla, 1, 1, 1, 1));
        p.head_b = v(&[0.3]);
        assert_eq!(output_head(&p, &v(&[0.8])).unwrap(), v(&[0.3]));

        let mut p = ParameterSet::<f64>::zeros(&arch(CellKind::Vanilla, 1, 2, 1, 2));
        p.head_w = Matrix::identity(2);
        assert_eq!(output_head(&p, &v(&[0.8, -0.1])).unwrap(), v(&[0.8, -0.1]));

        let mut rng = RngStream::new(8);
        p.head_w = init_params(2, 2, InitScheme::GlorotUniform, &mut rng).unwrap();
        p.head_b = v(&[0.5, -0.5]);
        let y = output_head(&p, &v(&[1.0, 0.0])).unwrap();
        assert_eq!(y, p.head_w.column(0).add(&p.head_b).unwrap());
        assert!(output_head(&p, &v(&[1.0])).is_err());
    }

    #[test]
    fn free_run_single_step_matches_forward() {
        let mut rng = RngStream::new(4);
        let p: ParameterSet<f64> = ParameterSet::init(&arch(CellKind::Lstm, 1, 6, 2, 1), &mut rng).unwrap();
        let window: Vec<_> = (0..10).map(|t| v(&[(t as f64 * 0.2).sin()])).collect();
        let run = free_run(&p, &window, 1, Feedback::Value).unwrap();
        let fwd = forward_sequence(&p, &window).unwrap();
        assert_eq!(&run.predictions[0], fwd.prediction());
    }

    #[test]
    fn free_run_feeds_back_predictions() {
        let mut rng = RngStream::new(5);
        let p: ParameterSet<f64> = ParameterSet::init(&arch(CellKind::Vanilla, 1, 4, 1, 1), &mut rng).unwrap();
        let window: Vec<_> = (0..5).map(|t| v(&[t as f64 * 0.1])).collect();
        let run = free_run(&p, &window, 3, Feedback::Value).unwrap();
        let mut extended = window.clone();
        extended.push(run.predictions[0].clone());
        extended.push(run.predictions[1].clone());
        let fwd = forward_sequence(&p, &extended).unwrap();
        assert_eq!(&run.predictions[2], fwd.prediction());
        assert_eq!(run.trace.timesteps(), 7);
    }

    #[test]
    fn free_run_text_uses_argmax() {
        let mut rng = RngStream::new(6);
        let p: ParameterSet<f64> = ParameterSet::init(&arch(CellKind::Lstm, 3, 4, 1, 3), &mut rng).unwrap();
        let window = vec![Vector::one_hot(3, 0), Vector::one_hot(3, 2)];
        let run = free_run(&p, &window, 2, Feedback::ArgmaxOneHot).unwrap();
        let fed = run.trace.steps[0][2].x.clone();
        assert_eq!(fed, Vector::one_hot(3, run.predictions[0].argmax().unwrap()));
    }

    #[test]
    fn layer_count_bounds() {
        let mut rng = RngStream::new(1);
        assert!(matches!(
            ParameterSet::<f64>::init(&arch(CellKind::Lstm, 1, 2, 8, 1), &mut rng),
            Err(ModelError::LayerCount(8))
        ));
        assert!(ParameterSet::<f64>::init(&arch(CellKind::Lstm, 1, 2, 0, 1), &mut rng).is_err());
        assert!(ParameterSet::<f64>::init(&arch(CellKind::Lstm, 1, 2, 7, 1), &mut rng).is_ok());
    }

    #[test]
    fn generic_over_f32() {
        let mut rng = RngStream::new(2);
        let p: ParameterSet<f32> = ParameterSet::init(&arch(CellKind::Lstm, 1, 3, 2, 1), &mut rng).unwrap();
        let t = forward_sequence(&p, &vec![Vector::from_f64(&[0.5]); 4]).unwrap();
        assert!(t.prediction().is_finite());
    }

    proptest! {
        #[test]
        fn gate_ranges(seed in any::<u64>(), layers in 1usize..4, hidden in 1usize..8, len in 1usize..12) {
            let mut rng = RngStream::new(seed);
            let p: ParameterSet<f64> = ParameterSet::init(&arch(CellKind::Lstm, 2, hidden, layers, 1), &mut rng).unwrap();
            let inputs: Vec<_> = (0..len)
                .map(|_| Vector::from_f64(&[rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)]))
                .collect();
            let trace = forward_sequence(&p, &inputs).unwrap();
            for step in trace.steps.iter().flatten() {
                for g in [&step.i, &step.f, &step.o] {
                    prop_assert!(g.iter().all(|&x| x > 0.0 && x < 1.0));
                }
                prop_assert!(step.g.iter().all(|&x| x > -1.0 && x < 1.0));
                prop_assert!(step.a.iter().all(|&x| x > -1.0 && x < 1.0));
            }
        }

        #[test]
        fn forward_is_deterministic(seed in any::<u64>(), vanilla in any::<bool>()) {
            let kind = if vanilla { CellKind::Vanilla } else { CellKind::Lstm };
            let p: ParameterSet<f64> = ParameterSet::init(&arch(kind, 1, 5, 2, 1), &mut RngStream::new(seed)).unwrap();
            let inputs: Vec<_> = (0..6).map(|t| v(&[t as f64 * 0.4 - 1.0])).collect();
            prop_assert_eq!(forward_sequence(&p, &inputs).unwrap(), forward_sequence(&p, &inputs).unwrap());
        }

        #[test]
        fn stacking_equals_chained_single_layers(seed in any::<u64>(), vanilla in any::<bool>(), len in 1usize..10) {
            let kind = if vanilla { CellKind::Vanilla } else { CellKind::Lstm };
            let mut rng = RngStream::new(seed);
            let p: ParameterSet<f64> = ParameterSet::init(&arch(kind, 1, 4, 2, 1), &mut rng).unwrap();
            let inputs: Vec<_> = (0..len).map(|_| v(&[rng.uniform(-1.0, 1.0)])).collect();
            let full = forward_sequence(&p, &inputs).unwrap();

            let bottom = ParameterSet { layers: vec![p.layers[0].clone()], head_w: Matrix::zeros(1, 4), head_b: v(&[0.0]) };
            let top = ParameterSet { layers: vec![p.layers[1].clone()], head_w: p.head_w.clone(), head_b: p.head_b.clone() };
            let lower = forward_sequence(&bottom, &inputs).unwrap();
            let mids: Vec<_> = lower.steps[0].iter().map(|s| s.a.clone()).collect();
            let upper = forward_sequence(&top, &mids).unwrap();
            prop_assert_eq!(&full.steps[0], &lower.steps[0]);
            prop_assert_eq!(&full.steps[1], &upper.steps[0]);
            prop_assert_eq!(full.prediction(), upper.prediction());
        }
    }
}
