//! Dense linear algebra, elementwise nonlinearities and seeded randomness.
//!
//! Everything above this module is deterministic given a seed: the only
//! source of randomness is [`RngStream`], which wraps a ChaCha8 generator
//! whose output is specified bit-for-bit independent of platform.

use std::fmt;
use std::ops::{Deref, DerefMut};
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MathError {
    #[error("{op}: dimension mismatch ({left} vs {right})")]
    DimensionMismatch {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("unknown initialization scheme `{0}`")]
    UnknownScheme(String),
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
}

fn mismatch(op: &'static str, left: impl fmt::Display, right: impl fmt::Display) -> MathError {
    MathError::DimensionMismatch {
        op,
        left: left.to_string(),
        right: right.to_string(),
    }
}

/// A dense vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
#[serde(bound = "S: Scalar")]
pub struct Vector<S> {
    data: Vec<S>,
}

impl<S: Scalar> Vector<S> {
    pub fn new(data: Vec<S>) -> Self {
        Self { data }
    }

    /// Converts every element to another scalar type through `f64`.
    pub fn cast<T: Scalar>(&self) -> Vector<T> {
        Vector::new(self.data.iter().map(|v| T::of(v.as_f64())).collect())
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![S::zero(); len],
        }
    }

    pub fn from_f64(values: &[f64]) -> Self {
        Self::new(values.iter().map(|&v| S::of(v)).collect())
    }

    /// Unit vector with a one at `index`.
    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut v = Self::zeros(len);
        v.data[index] = S::one();
        v
    }

    pub fn into_inner(self) -> Vec<S> {
        self.data
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn add(&self, other: &Self) -> Result<Self, MathError> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, MathError> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: S) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self::new(self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip_with(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(S, S) -> S,
    ) -> Result<Self, MathError> {
        if self.len() != other.len() {
            return Err(mismatch(op, self.len(), other.len()));
        }
        Ok(Self::new(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    /// Euclidean norm.
    pub fn norm(&self) -> S {
        S::total(self.data.iter().map(|&v| v * v)).sqrt()
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, S)> = None;
        for (i, &v) in self.data.iter().enumerate() {
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((i, v)),
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<S> Deref for Vector<S> {
    type Target = [S];

    fn deref(&self) -> &[S] {
        &self.data
    }
}

impl<S> DerefMut for Vector<S> {
    fn deref_mut(&mut self) -> &mut [S] {
        &mut self.data
    }
}

impl<S> From<Vec<S>> for Vector<S> {
    fn from(data: Vec<S>) -> Self {
        Self { data }
    }
}

/// A dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    /// Converts every element to another scalar type through `f64`.
    pub fn cast<T: Scalar>(&self) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = S::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self, MathError> {
        if data.len() != rows * cols {
            return Err(mismatch(
                "matrix construction",
                format!("{rows}x{cols}"),
                format!("{} entries", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, MathError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(mismatch("matrix construction", cols, row.len()));
            }
            data.extend(row.iter().map(|&v| S::of(v)));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, row: usize, col: usize) -> S {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: S) {
        self.data[row * self.cols + col] = value;
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Column `col` as a vector.
    pub fn column(&self, col: usize) -> Vector<S> {
        Vector::new((0..self.rows).map(|r| self.get(r, col)).collect())
    }

    /// `self · v`.
    pub fn mul_vec(&self, v: &[S]) -> Result<Vector<S>, MathError> {
        if self.cols != v.len() {
            return Err(mismatch(
                "mat_vec_mul",
                format!("{}x{}", self.rows, self.cols),
                format!("vector of length {}", v.len()),
            ));
        }
        Ok(Vector::new(
            self.data
                .chunks_exact(self.cols.max(1))
                .take(self.rows)
                .map(|row| dot(row, v))
                .collect(),
        ))
    }

    /// `selfᵀ · v`.
    pub fn transpose_mul_vec(&self, v: &[S]) -> Result<Vector<S>, MathError> {
        if self.rows != v.len() {
            return Err(mismatch(
                "transpose_mul_vec",
                format!("{}x{}", self.rows, self.cols),
                format!("vector of length {}", v.len()),
            ));
        }
        let mut out = vec![S::zero(); self.cols];
        for (r, &scale) in v.iter().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, &m) in out.iter_mut().zip(row) {
                *o += m * scale;
            }
        }
        Ok(Vector::new(out))
    }

    /// Accumulates the outer product `u ⊗ w` into `self`.
    pub fn add_outer(&mut self, u: &[S], w: &[S]) -> Result<(), MathError> {
        if self.rows != u.len() || self.cols != w.len() {
            return Err(mismatch(
                "add_outer",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", u.len(), w.len()),
            ));
        }
        for (r, &ur) in u.iter().enumerate() {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (m, &wc) in row.iter_mut().zip(w) {
                *m += ur * wc;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Matrix-vector product.
pub fn mat_vec_mul<S: Scalar>(m: &Matrix<S>, v: &Vector<S>) -> Result<Vector<S>, MathError> {
    m.mul_vec(v)
}

/// Elementwise (Hadamard) product.
pub fn hadamard<S: Scalar>(a: &Vector<S>, b: &Vector<S>) -> Result<Vector<S>, MathError> {
    a.zip_with(b, "hadamard", |x, y| x * y)
}

/// Logistic sigmoid of a single value, evaluated so that `exp` never overflows.
#[inline]
pub fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn sigmoid<S: Scalar>(v: &Vector<S>) -> Vector<S> {
    v.map(sigmoid_scalar)
}

pub fn tanh_vec<S: Scalar>(v: &Vector<S>) -> Vector<S> {
    v.map(|x| x.tanh())
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    #[default]
    GlorotUniform,
}

impl InitScheme {
    pub fn name(self) -> &'static str {
        match self {
            InitScheme::GlorotUniform => "glorot-uniform",
        }
    }
}

impl FromStr for InitScheme {
    type Err = MathError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "glorot-uniform" => Ok(InitScheme::GlorotUniform),
            other => Err(MathError::UnknownScheme(other.to_string())),
        }
    }
}

/// Draws a `rows × cols` matrix with fan-in `cols` and fan-out `rows`.
pub fn init_params<S: Scalar>(
    rows: usize,
    cols: usize,
    scheme: InitScheme,
    rng: &mut RngStream,
) -> Result<Matrix<S>, MathError> {
    if rows == 0 || cols == 0 {
        return Err(MathError::EmptyShape { rows, cols });
    }
    match scheme {
        InitScheme::GlorotUniform => {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| S::of(rng.uniform(-bound, bound)))
                .collect();
            Matrix::from_vec(rows, cols, data)
        }
    }
}

/// Seeded random stream backed by ChaCha8.
///
/// Floats are built from the top 53 bits of each `u64` draw, so the float
/// sequence is as portable as the integer sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub const ALGORITHM_ID: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for a named purpose, derived from a base seed.
    pub fn derive(seed: u64, purpose: &str) -> Self {
        Self::new(derive_seed(seed, purpose))
    }

    pub fn algorithm_id(&self) -> &'static str {
        Self::ALGORITHM_ID
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Opaque generator state: key followed by the little-endian word position.
    pub fn state_bytes(&self) -> Vec<u8> {
        let mut bytes = self.rng.get_seed().to_vec();
        bytes.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        bytes.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        bytes
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)` without modulo bias. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return x % n;
            }
        }
    }
}

/// splitmix64 finalizer over the seed mixed with an FNV-1a hash of `purpose`.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
