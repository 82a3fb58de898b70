//! Losses and backpropagation through time over a recorded [`ForwardTrace`].
//!
//! Gradients are hand-derived for the two cell kinds. The sweep visits
//! `(layer, t)` pairs with time descending and, within a timestep, layers
//! top-down, so every cell sees its complete upstream gradient: the
//! recurrent term from `t+1` and the input term from the layer above.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cells::{
    forward_with_horizon, CellKind, CellParams, CellStep, ForwardTrace, GateWeights, ModelError,
    ParameterSet,
};
use crate::math::{MathError, RngStream, Vector};
use crate::scalar::{Scalar, TwoFloat};

/// Gradients mirror the parameter layout exactly.
pub type GradientSet<S> = ParameterSet<S>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BpttError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("prediction has length {prediction}, target has length {target}")]
    LengthMismatch { prediction: usize, target: usize },
    #[error("cross-entropy target is not one-hot")]
    NotOneHot,
    #[error("trace does not match parameters: {0}")]
    TraceMismatch(String),
    #[error("backward sweep already finished")]
    SweepFinished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    SoftmaxCrossEntropy,
}

/// A training example: an input sequence and one target per readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Example<S> {
    pub inputs: Vec<Vector<S>>,
    pub targets: Vec<Vector<S>>,
}

impl<S: Scalar> Example<S> {
    pub fn horizon(&self) -> usize {
        self.targets.len()
    }

    pub fn cast<T: Scalar>(&self) -> Example<T> {
        Example {
            inputs: self.inputs.iter().map(Vector::cast).collect(),
            targets: self.targets.iter().map(Vector::cast).collect(),
        }
    }
}

fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum = S::total(exps.iter().copied());
    exps.into_iter().map(|e| e / sum).collect()
}

fn hot_index<S: Scalar>(target: &[S]) -> Result<usize, BpttError> {
    let mut hot = None;
    for (i, &t) in target.iter().enumerate() {
        if t == S::one() && hot.is_none() {
            hot = Some(i);
        } else if t != S::zero() {
            return Err(BpttError::NotOneHot);
        }
    }
    hot.ok_or(BpttError::NotOneHot)
}

/// Loss of one readout and its gradient with respect to the prediction.
fn loss_and_grad<S: Scalar>(
    kind: LossKind,
    prediction: &[S],
    target: &[S],
) -> Result<(S, Vector<S>), BpttError> {
    if prediction.len() != target.len() {
        return Err(BpttError::LengthMismatch {
            prediction: prediction.len(),
            target: target.len(),
        });
    }
    match kind {
        LossKind::Mse => {
            let n = S::of(prediction.len() as f64);
            let diff: Vec<S> = prediction.iter().zip(target).map(|(&p, &t)| p - t).collect();
            let loss = S::total(diff.iter().map(|&d| d * d)) / n;
            let grad = diff.iter().map(|&d| S::of(2.0) * d / n).collect();
            Ok((loss, Vector::new(grad)))
        }
        LossKind::SoftmaxCrossEntropy => {
            let hot = hot_index(target)?;
            let max = prediction.iter().copied().fold(S::neg_infinity(), S::max);
            let log_sum = S::total(prediction.iter().map(|&z| (z - max).exp())).ln() + max;
            let loss = log_sum - prediction[hot];
            let mut grad = softmax(prediction);
            grad[hot] -= S::one();
            Ok((loss, Vector::new(grad)))
        }
    }
}

/// Mean squared error, or `−log softmax(prediction)[hot]` for cross-entropy.
pub fn loss<S: Scalar>(
    kind: LossKind,
    prediction: &Vector<S>,
    target: &Vector<S>,
) -> Result<S, BpttError> {
    loss_and_grad(kind, prediction, target).map(|(l, _)| l)
}

/// Mean of the per-readout losses.
pub fn sequence_loss<S: Scalar>(
    kind: LossKind,
    predictions: &[Vector<S>],
    targets: &[Vector<S>],
) -> Result<S, BpttError> {
    if predictions.len() != targets.len() {
        return Err(BpttError::LengthMismatch {
            prediction: predictions.len(),
            target: targets.len(),
        });
    }
    let mut total = S::zero();
    for (p, t) in predictions.iter().zip(targets) {
        total += loss(kind, p, t)?;
    }
    Ok(total * (S::one() / S::of(predictions.len() as f64)))
}

/// Output of one `(layer, t)` backward step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct BackwardStep<S> {
    pub layer: usize,
    /// Zero-based timestep.
    pub t: usize,
    /// Total derivative `∂L/∂a` of this cell's activation.
    pub d_activation: Vector<S>,
    pub grad_norm: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardResult<S> {
    pub loss: S,
    pub grads: GradientSet<S>,
    /// `‖∂L/∂a‖` indexed `[layer][t]`.
    pub grad_norms: Vec<Vec<S>>,
}

/// Resumable reverse sweep over a trace, one `(layer, t)` cell at a time.
///
/// The sweep does not borrow the trace or the parameters; every call must
/// pass the same ones given to [`BackwardSweep::new`].
#[derive(Debug, Clone)]
pub struct BackwardSweep<S> {
    layers: usize,
    timesteps: usize,
    loss: S,
    /// Head gradient per timestep, where a readout happened.
    d_predictions: Vec<Option<Vector<S>>>,
    grads: GradientSet<S>,
    da_next: Vec<Vector<S>>,
    dc_next: Vec<Vector<S>>,
    dx_from_above: Option<Vector<S>>,
    norms: Vec<Vec<S>>,
    /// Steps taken so far, in visiting order.
    cursor: usize,
}

impl<S: Scalar> BackwardSweep<S> {
    pub fn new(
        trace: &ForwardTrace<S>,
        params: &ParameterSet<S>,
        kind: LossKind,
        targets: &[Vector<S>],
    ) -> Result<Self, BpttError> {
        check_trace(trace, params)?;
        if targets.len() != trace.predictions.len() {
            return Err(BpttError::LengthMismatch {
                prediction: trace.predictions.len(),
                target: targets.len(),
            });
        }
        let steps = trace.timesteps();
        let scale = S::one() / S::of(targets.len() as f64);
        let mut d_predictions = vec![None; steps];
        let mut total = S::zero();
        for ((p, y), &t) in trace.predictions.iter().zip(targets).zip(&trace.prediction_steps) {
            let (l, g) = loss_and_grad(kind, p, y)?;
            total += l;
            d_predictions[t] = Some(g.scale(scale));
        }
        let layers = params.layers.len();
        Ok(Self {
            layers,
            timesteps: steps,
            loss: total * scale,
            d_predictions,
            grads: params.zeros_like(),
            da_next: params.layers.iter().map(|c| Vector::zeros(c.hidden())).collect(),
            dc_next: params.layers.iter().map(|c| Vector::zeros(c.hidden())).collect(),
            dx_from_above: None,
            norms: vec![vec![S::zero(); steps]; layers],
            cursor: 0,
        })
    }

    pub fn loss(&self) -> S {
        self.loss
    }

    pub fn total_steps(&self) -> usize {
        self.layers * self.timesteps
    }

    pub fn is_finished(&self) -> bool {
        self.cursor == self.total_steps()
    }

    /// The `(layer, t)` visited by the next call to [`step`](Self::step).
    pub fn peek(&self) -> Option<(usize, usize)> {
        if self.is_finished() {
            return None;
        }
        let t = self.timesteps - 1 - self.cursor / self.layers;
        let layer = self.layers - 1 - self.cursor % self.layers;
        Some((layer, t))
    }

    pub fn step(
        &mut self,
        trace: &ForwardTrace<S>,
        params: &ParameterSet<S>,
    ) -> Result<BackwardStep<S>, BpttError> {
        let (layer, t) = self.peek().ok_or(BpttError::SweepFinished)?;
        let top = layer + 1 == self.layers;
        let mut da = std::mem::take(&mut self.da_next[layer]);
        if top {
            if let Some(dp) = &self.d_predictions[t] {
                let a = &trace.steps[layer][t].a;
                self.grads.head_w.add_outer(dp, a)?;
                add_into(&mut self.grads.head_b, dp);
                add_into(&mut da, &params.head_w.transpose_mul_vec(dp)?);
            }
        } else {
            let dx = self.dx_from_above.take().expect("layer above already visited");
            add_into(&mut da, &dx);
        }
        let rec = &trace.steps[layer][t];
        let dc_next = std::mem::take(&mut self.dc_next[layer]);
        let (da_prev, dc_prev, dx) =
            cell_backward(&params.layers[layer], &mut self.grads.layers[layer], rec, &da, &dc_next)?;
        self.da_next[layer] = da_prev;
        self.dc_next[layer] = dc_prev;
        if layer > 0 {
            self.dx_from_above = Some(dx);
        }
        let grad_norm = da.norm();
        self.norms[layer][t] = grad_norm;
        self.cursor += 1;
        Ok(BackwardStep {
            layer,
            t,
            d_activation: da,
            grad_norm,
        })
    }

    /// Runs any remaining steps and returns the accumulated gradients.
    pub fn finish(
        mut self,
        trace: &ForwardTrace<S>,
        params: &ParameterSet<S>,
    ) -> Result<BackwardResult<S>, BpttError> {
        while !self.is_finished() {
            self.step(trace, params)?;
        }
        Ok(BackwardResult {
            loss: self.loss,
            grads: self.grads,
            grad_norms: self.norms,
        })
    }
}

fn add_into<S: Scalar>(acc: &mut [S], v: &[S]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn check_trace<S: Scalar>(trace: &ForwardTrace<S>, params: &ParameterSet<S>) -> Result<(), BpttError> {
    if trace.layers() != params.layers.len() {
        return Err(BpttError::TraceMismatch(format!(
            "{} traced layers, {} parameter layers",
            trace.layers(),
            params.layers.len()
        )));
    }
    let steps = trace.timesteps();
    if steps == 0 || trace.steps.iter().any(|l| l.len() != steps) {
        return Err(BpttError::TraceMismatch("trace is not rectangular".into()));
    }
    for (l, (cell, layer)) in params.layers.iter().zip(&trace.steps).enumerate() {
        let rec = &layer[0];
        if rec.a.len() != cell.hidden() || rec.x.len() != cell.input_dim() {
            return Err(BpttError::TraceMismatch(format!("layer {l} shapes differ")));
        }
        if (cell.kind() == CellKind::Lstm) == rec.c.is_empty() {
            return Err(BpttError::TraceMismatch(format!("layer {l} cell kind differs")));
        }
    }
    if trace.prediction_steps.iter().any(|&t| t >= steps) {
        return Err(BpttError::TraceMismatch("readout step out of range".into()));
    }
    Ok(())
}

/// Backpropagates one cell, accumulating into `grads`.
/// Returns `(∂L/∂a_prev, ∂L/∂c_prev, ∂L/∂x)`.
fn cell_backward<S: Scalar>(
    params: &CellParams<S>,
    grads: &mut CellParams<S>,
    rec: &CellStep<S>,
    da: &[S],
    dc_next: &[S],
) -> Result<(Vector<S>, Vector<S>, Vector<S>), BpttError> {
    let one = S::one();
    let mut da_prev = Vector::zeros(rec.a_prev.len());
    let mut dx = Vector::zeros(rec.x.len());
    let mut apply = |w: &GateWeights<S>,
                     g: &mut GateWeights<S>,
                     dz: &[S]|
     -> Result<(), MathError> {
        g.w_x.add_outer(dz, &rec.x)?;
        g.w_a.add_outer(dz, &rec.a_prev)?;
        add_into(&mut g.b, dz);
        add_into(&mut da_prev, &w.w_a.transpose_mul_vec(dz)?);
        add_into(&mut dx, &w.w_x.transpose_mul_vec(dz)?);
        Ok(())
    };
    match (params, grads) {
        (CellParams::Vanilla(w), CellParams::Vanilla(g)) => {
            let dz: Vec<S> = da.iter().zip(rec.a.iter()).map(|(&d, &a)| d * (one - a * a)).collect();
            apply(w, g, &dz)?;
            Ok((da_prev, Vector::default(), dx))
        }
        (CellParams::Lstm(w), CellParams::Lstm(g)) => {
            let n = rec.a.len();
            let mut dz_i = vec![S::zero(); n];
            let mut dz_f = vec![S::zero(); n];
            let mut dz_o = vec![S::zero(); n];
            let mut dz_g = vec![S::zero(); n];
            let mut dc_prev = vec![S::zero(); n];
            for k in 0..n {
                let tc = rec.c[k].tanh();
                let d_o = da[k] * tc;
                let dc = dc_next.get(k).copied().unwrap_or(S::zero())
                    + da[k] * rec.o[k] * (one - tc * tc);
                let (i, f, o, gg) = (rec.i[k], rec.f[k], rec.o[k], rec.g[k]);
                dz_i[k] = dc * gg * i * (one - i);
                dz_f[k] = dc * rec.c_prev[k] * f * (one - f);
                dz_o[k] = d_o * o * (one - o);
                dz_g[k] = dc * i * (one - gg * gg);
                dc_prev[k] = dc * f;
            }
            apply(&w.input, &mut g.input, &dz_i)?;
            apply(&w.forget, &mut g.forget, &dz_f)?;
            apply(&w.output, &mut g.output, &dz_o)?;
            apply(&w.candidate, &mut g.candidate, &dz_g)?;
            Ok((da_prev, Vector::new(dc_prev), dx))
        }
        _ => Err(BpttError::TraceMismatch("gradient layout differs from parameters".into())),
    }
}

/// Exact reverse-mode gradients of the loss over a recorded trace.
pub fn backward<S: Scalar>(
    trace: &ForwardTrace<S>,
    params: &ParameterSet<S>,
    kind: LossKind,
    targets: &[Vector<S>],
) -> Result<BackwardResult<S>, BpttError> {
    BackwardSweep::new(trace, params, kind, targets)?.finish(trace, params)
}

/// Forward and backward for one example.
pub fn example_gradient<S: Scalar>(
    params: &ParameterSet<S>,
    example: &Example<S>,
    kind: LossKind,
) -> Result<BackwardResult<S>, BpttError> {
    let trace = forward_with_horizon(params, &example.inputs, example.horizon())?;
    backward(&trace, params, kind, &example.targets)
}

/// Running sum of per-example losses and gradients. Examples must be added
/// in a fixed order for the mean to be bit-reproducible.
#[derive(Debug, Clone)]
pub struct BatchAccumulator<S> {
    loss: S,
    grads: GradientSet<S>,
    count: usize,
}

impl<S: Scalar> BatchAccumulator<S> {
    pub fn new(params: &ParameterSet<S>) -> Self {
        Self {
            loss: S::zero(),
            grads: params.zeros_like(),
            count: 0,
        }
    }

    pub fn add(&mut self, loss: S, grads: &GradientSet<S>) {
        self.loss += loss;
        for (acc, g) in self.grads.slices_mut().into_iter().zip(grads.slices()) {
            add_into(acc, g);
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean loss and mean gradient.
    pub fn mean(mut self) -> (S, GradientSet<S>) {
        let inv = S::one() / S::of(self.count.max(1) as f64);
        self.grads.for_each_slice_mut(|s| s.iter_mut().for_each(|v| *v *= inv));
        (self.loss * inv, self.grads)
    }
}

/// Mean loss and mean gradient over a batch.
pub fn batch_gradient<S: Scalar>(
    params: &ParameterSet<S>,
    batch: &[Example<S>],
    kind: LossKind,
) -> Result<(S, GradientSet<S>), BpttError> {
    let mut acc = BatchAccumulator::new(params);
    for ex in batch {
        let r = example_gradient(params, ex, kind)?;
        acc.add(r.loss, &r.grads);
    }
    Ok(acc.mean())
}

/// Mean loss over a batch, forward only.
pub fn batch_loss<S: Scalar>(
    params: &ParameterSet<S>,
    batch: &[Example<S>],
    kind: LossKind,
) -> Result<S, BpttError> {
    let mut total = S::zero();
    for ex in batch {
        let trace = forward_with_horizon(params, &ex.inputs, ex.horizon())?;
        total += sequence_loss(kind, &trace.predictions, &ex.targets)?;
    }
    Ok(total / S::of(batch.len().max(1) as f64))
}

pub fn global_norm<S: Scalar>(g: &GradientSet<S>) -> S {
    S::total(g.slices().iter().flat_map(|s| s.iter()).map(|&v| v * v)).sqrt()
}

/// Rescales `g` to global L2 norm `max_norm` when it exceeds it.
/// Returns the clipped gradients and the pre-clip norm.
pub fn clip_gradients<S: Scalar>(mut g: GradientSet<S>, max_norm: S) -> (GradientSet<S>, S) {
    let norm = global_norm(&g);
    if norm > max_norm {
        let scale = max_norm / norm;
        g.for_each_slice_mut(|s| s.iter_mut().for_each(|v| *v *= scale));
    }
    (g, norm)
}

/// Parameter-space coordinates are checked exhaustively up to this count;
/// larger networks are subsampled.
const GRAD_CHECK_EXHAUSTIVE: usize = 4000;
const GRAD_CHECK_SAMPLE: usize = 400;

/// Largest relative disagreement between analytic gradients and central
/// differences `(L(θ+ε) − L(θ−ε)) / 2ε`, with relative error
/// `|a − n| / max(|a| + |n|, 1e-8)`.
///
/// The perturbed losses are evaluated in double-double precision, so the
/// difference quotient carries no visible round-off even for gradients
/// near the `1e-8` floor.
pub fn grad_check<S: Scalar>(
    params: &ParameterSet<S>,
    batch: &[Example<S>],
    kind: LossKind,
    epsilon: S,
) -> Result<S, BpttError> {
    let (_, analytic) = batch_gradient(params, batch, kind)?;
    let analytic: Vec<S> = analytic.slices().iter().flat_map(|s| s.iter().copied()).collect();
    let total = analytic.len();
    let coords: Vec<usize> = if total <= GRAD_CHECK_EXHAUSTIVE {
        (0..total).collect()
    } else {
        let mut rng = RngStream::new(0x67_7261_6463);
        (0..GRAD_CHECK_SAMPLE).map(|_| rng.below(total as u64) as usize).collect()
    };
    let mut probe: ParameterSet<TwoFloat> = params.cast();
    let batch: Vec<Example<TwoFloat>> = batch.iter().map(Example::cast).collect();
    let epsilon = TwoFloat::of(epsilon.as_f64());
    let two = TwoFloat::of(2.0);
    let mut worst: f64 = 0.0;
    for idx in coords {
        let original = get_flat(&probe, idx);
        set_flat(&mut probe, idx, original + epsilon);
        let plus = batch_loss(&probe, &batch, kind)?;
        set_flat(&mut probe, idx, original - epsilon);
        let minus = batch_loss(&probe, &batch, kind)?;
        set_flat(&mut probe, idx, original);
        let numeric = ((plus - minus) / (two * epsilon)).as_f64();
        let a = analytic[idx].as_f64();
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(S::of(worst))
}

fn get_flat<S: Scalar>(p: &ParameterSet<S>, mut idx: usize) -> S {
    for s in p.slices() {
        if idx < s.len() {
            return s[idx];
        }
        idx -= s.len();
    }
    panic!("flat index out of range");
}

fn set_flat<S: Scalar>(p: &mut ParameterSet<S>, mut idx: usize, value: S) {
    for s in p.slices_mut() {
        if idx < s.len() {
            s[idx] = value;
            return;
        }
        idx -= s.len();
    }
    panic!("flat index out of range");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{forward_sequence, Architecture};
    use crate::math::{InitScheme, Matrix};
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

    fn random_example(rng: &mut RngStream, kind: LossKind, input: usize, len: usize, horizon: usize) -> Example<f64> {
        let inputs = (0..len)
            .map(|_| Vector::new((0..input).map(|_| rng.uniform(-1.0, 1.0)).collect()))
            .collect();
        let targets = (0..horizon)
            .map(|_| match kind {
                LossKind::Mse => Vector::new((0..input).map(|_| rng.uniform(-1.0, 1.0)).collect()),
                LossKind::SoftmaxCrossEntropy => Vector::one_hot(input, rng.below(input as u64) as usize),
            })
            .collect();
        Example { inputs, targets }
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss(LossKind::Mse, &v(&[0.3, 0.2]), &v(&[0.3, 0.2])).unwrap(), 0.0);
        assert_eq!(loss(LossKind::Mse, &v(&[1.0, 0.0]), &v(&[0.0, 0.0])).unwrap(), 0.5);
        let ce = loss(LossKind::SoftmaxCrossEntropy, &v(&[0.0, 0.0]), &v(&[1.0, 0.0])).unwrap();
        assert!((ce - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            loss(LossKind::Mse, &v(&[1.0]), &v(&[1.0, 2.0])),
            Err(BpttError::LengthMismatch { .. })
        ));
        assert_eq!(
            loss(LossKind::SoftmaxCrossEntropy, &v(&[0.0, 0.0]), &v(&[0.5, 0.5])),
            Err(BpttError::NotOneHot)
        );
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let l = loss(LossKind::SoftmaxCrossEntropy, &v(&[1000.0, 0.0]), &v(&[0.0, 1.0])).unwrap();
        assert!((l - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn zero_loss_gradient_means_zero_gradients() {
        let mut rng = RngStream::new(1);
        let p: ParameterSet<f64> = ParameterSet::init(&arch(CellKind::Lstm, 1, 3, 2, 1), &mut rng).unwrap();
        let inputs = vec![v(&[0.2]), v(&[-0.4]), v(&[0.9])];
        let trace = forward_sequence(&p, &inputs).unwrap();
        let target = trace.prediction().clone();
        let r = backward(&trace, &p, LossKind::Mse, &[target]).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.grads.slices().iter().all(|s| s.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn single_vanilla_step_matches_hand_chain_rule() {
        // a = tanh(wx·x + wa·a0 + b), y = h·a + hb, L = (y − t)².
        let (wx, wa, b, h, hb) = (0.7, -0.3, 0.1, 1.5, -0.2);
        let (x, t) = (0.4, 0.25);
        let p = ParameterSet {
            layers: vec![CellParams::Vanilla(GateWeights {
                w_x: Matrix::from_rows(&[&[wx]]).unwrap(),
                w_a: Matrix::from_rows(&[&[wa]]).unwrap(),
                b: v(&[b]),
            })],
            head_w: Matrix::from_rows(&[&[h]]).unwrap(),
            head_b: v(&[hb]),
        };
        let trace = forward_sequence(&p, &[v(&[x])]).unwrap();
        let r = backward(&trace, &p, LossKind::Mse, &[v(&[t])]).unwrap();

        let a = (wx * x + b).tanh();
        let y = h * a + hb;
        let dy = 2.0 * (y - t);
        let dz = dy * h * (1.0 - a * a);
        let CellParams::Vanilla(g) = &r.grads.layers[0] else { panic!() };
        assert!((g.w_x.get(0, 0) - dz * x).abs() < 1e-15);
        assert_eq!(g.w_a.get(0, 0), 0.0); // a⁰ = 0
        assert!((g.b[0] - dz).abs() < 1e-15);
        assert!((r.grads.head_w.get(0, 0) - dy * a).abs() < 1e-15);
        assert!((r.grads.head_b[0] - dy).abs() < 1e-15);
        assert!((r.grad_norms[0][0] - (dy * h).abs()).abs() < 1e-15);
    }

    #[test]
    fn grad_check_zero_gradient_point() {
        // A dead network with a target equal to its output: every gradient is zero.
        let p = ParameterSet::<f64>::zeros(&arch(CellKind::Lstm, 1, 2, 1, 1));
        let ex = Example { inputs: vec![v(&[0.0])], targets: vec![v(&[0.0])] };
        assert_eq!(grad_check(&p, &[ex], LossKind::Mse, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn grad_check_lstm_one_layer() {
        let mut rng = RngStream::new(1);
        let p: ParameterSet<f64> = ParameterSet::init(&arch(CellKind::Lstm, 1, 4, 1, 1), &mut rng).unwrap();
        let batch: Vec<_> = (0..2).map(|_| random_example(&mut rng, LossKind::Mse, 1, 5, 1)).collect();
        let err = grad_check(&p, &batch, LossKind::Mse, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn grad_check_vanilla_two_layers() {
        let mut rng = RngStream::new(2);
        let p: ParameterSet<f64> = ParameterSet::init(&arch(CellKind::Vanilla, 1, 8, 2, 1), &mut rng).unwrap();
        let batch: Vec<_> = (0..2).map(|_| random_example(&mut rng, LossKind::Mse, 1, 10, 3)).collect();
        let err = grad_check(&p, &batch, LossKind::Mse, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn clip_examples() {
        let mut p = ParameterSet::<f64>::zeros(&arch(CellKind::Vanilla, 1, 1, 1, 1));
        let (same, norm) = clip_gradients(p.clone(), 1.0);
        assert_eq!((same, norm), (p.clone(), 0.0));

        p.head_b[0] = 0.5;
        let (same, _) = clip_gradients(p.clone(), 1.0);
        assert_eq!(same, p);

        p.head_b[0] = 10.0;
        let (clipped, norm) = clip_gradients(p, 1.0);
        assert_eq!(norm, 10.0);
        assert_eq!(clipped.head_b[0], 1.0);
    }

    #[test]
    fn sweep_order_and_mismatch() {
        let mut rng = RngStream::new(3);
        let p: ParameterSet<f64> = ParameterSet::init(&arch(CellKind::Lstm, 1, 2, 2, 1), &mut rng).unwrap();
        let trace = forward_sequence(&p, &[v(&[0.1]), v(&[0.2]), v(&[0.3])]).unwrap();
        let mut sweep = BackwardSweep::new(&trace, &p, LossKind::Mse, &[v(&[0.0])]).unwrap();
        let mut order = Vec::new();
        while let Some(pos) = sweep.peek() {
            let s = sweep.step(&trace, &p).unwrap();
            assert_eq!((s.layer, s.t), pos);
            order.push(pos);
        }
        assert_eq!(order, vec![(1, 2), (0, 2), (1, 1), (0, 1), (1, 0), (0, 0)]);
        assert_eq!(sweep.step(&trace, &p).unwrap_err(), BpttError::SweepFinished);

        let other: ParameterSet<f64> = ParameterSet::init(&arch(CellKind::Lstm, 1, 2, 1, 1), &mut rng).unwrap();
        assert!(matches!(
            backward(&trace, &other, LossKind::Mse, &[v(&[0.0])]),
            Err(BpttError::TraceMismatch(_))
        ));
        let vanilla: ParameterSet<f64> = ParameterSet::init(&arch(CellKind::Vanilla, 1, 2, 2, 1), &mut rng).unwrap();
        assert!(backward(&trace, &vanilla, LossKind::Mse, &[v(&[0.0])]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn gradients_match_finite_differences(
            seed in any::<u64>(),
            lstm in any::<bool>(),
            cross_entropy in any::<bool>(),
            layers in 1usize..=2,
            hidden in 1usize..=8,
            len in 1usize..=10,
        ) {
            let kind = if lstm { CellKind::Lstm } else { CellKind::Vanilla };
            let loss_kind = if cross_entropy { LossKind::SoftmaxCrossEntropy } else { LossKind::Mse };
            let dim = if cross_entropy { 3 } else { 1 };
            let mut rng = RngStream::new(seed);
            let p: ParameterSet<f64> = ParameterSet::init(&arch(kind, dim, hidden, layers, dim), &mut rng).unwrap();
            let horizon = if cross_entropy { 1 } else { 1 + rng.below(len as u64) as usize };
            let batch: Vec<_> = (0..2).map(|_| random_example(&mut rng, loss_kind, dim, len, horizon)).collect();
            let err = grad_check(&p, &batch, loss_kind, 1e-5).unwrap();
            prop_assert!(err < 1e-4, "relative error {}", err);
        }

        #[test]
        fn gradients_scale_with_residual(seed in any::<u64>(), s in -3.0f64..3.0, lstm in any::<bool>()) {
            let kind = if lstm { CellKind::Lstm } else { CellKind::Vanilla };
            let mut rng = RngStream::new(seed);
            let p: ParameterSet<f64> = ParameterSet::init(&arch(kind, 1, 4, 2, 1), &mut rng).unwrap();
            let ex = random_example(&mut rng, LossKind::Mse, 1, 6, 2);
            let trace = forward_with_horizon(&p, &ex.inputs, 2).unwrap();
            // Target chosen so that (prediction − target) is scaled by s.
            let scaled: Vec<_> = trace.predictions.iter().zip(&ex.targets)
                .map(|(p, t)| p.sub(&p.sub(t).unwrap().scale(s)).unwrap())
                .collect();
            let base = backward(&trace, &p, LossKind::Mse, &ex.targets).unwrap();
            let other = backward(&trace, &p, LossKind::Mse, &scaled).unwrap();
            for (a, b) in base.grads.slices().iter().zip(other.grads.slices()) {
                for (&x, &y) in a.iter().zip(b) {
                    prop_assert!((x * s - y).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn grad_norms_shape(seed in any::<u64>(), layers in 1usize..4, len in 1usize..12) {
            let mut rng = RngStream::new(seed);
            let p: ParameterSet<f64> = ParameterSet::init(&arch(CellKind::Lstm, 1, 3, layers, 1), &mut rng).unwrap();
            let ex = random_example(&mut rng, LossKind::Mse, 1, len, 1);
            let r = example_gradient(&p, &ex, LossKind::Mse).unwrap();
            prop_assert_eq!(r.grad_norms.len(), layers);
            for row in &r.grad_norms {
                prop_assert_eq!(row.len(), len);
                prop_assert!(row.iter().all(|&n| n >= 0.0));
            }
        }
    }
}
