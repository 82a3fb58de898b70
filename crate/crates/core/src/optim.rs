//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::bptt::GradientSet;
use crate::cells::ParameterSet;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct OptimizerState<S> {
    pub kind: OptimizerKind,
    pub step_count: u64,
    pub first_moment: ParameterSet<S>,
    pub second_moment: ParameterSet<S>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<S: Scalar> OptimizerState<S> {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPSILON: f64 = 1e-8;

    pub fn adam(params: &ParameterSet<S>) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            step_count: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            epsilon: Self::EPSILON,
        }
    }
}

/// One Adam update of `params` in place:
///
/// ```text
/// m ← β1·m + (1−β1)·g        v ← β2·v + (1−β2)·g²
/// θ ← θ − lr · (m / (1−β1ᵗ)) / (√(v / (1−β2ᵗ)) + ε)
/// ```
pub fn optimizer_step<S: Scalar>(
    params: &mut ParameterSet<S>,
    grads: &GradientSet<S>,
    opt: &mut OptimizerState<S>,
    learning_rate: f64,
) {
    opt.step_count += 1;
    let t = opt.step_count as i32;
    let b1 = S::of(opt.beta1);
    let b2 = S::of(opt.beta2);
    let one = S::one();
    let correction1 = one - b1.powi(t);
    let correction2 = one - b2.powi(t);
    let eps = S::of(opt.epsilon);
    let lr = S::of(learning_rate);

    let p_slices = params.slices_mut();
    let g_slices = grads.slices();
    let m_slices = opt.first_moment.slices_mut();
    let v_slices = opt.second_moment.slices_mut();
    for (((p, g), m), v) in p_slices.into_iter().zip(g_slices).zip(m_slices).zip(v_slices) {
        for k in 0..p.len() {
            let gk = g[k];
            m[k] = b1 * m[k] + (one - b1) * gk;
            v[k] = b2 * v[k] + (one - b2) * gk * gk;
            let m_hat = m[k] / correction1;
            let v_hat = v[k] / correction2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
