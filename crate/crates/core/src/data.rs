//! Training data: periodic functions, sliding windows and character corpora.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{RngStream, Vector};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("sequence needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("sample spacing must be positive, got {0}")]
    NonPositiveSpacing(f64),
    #[error("noise amplitude must lie in [0, 1], got {0}")]
    NoiseOutOfRange(f64),
    #[error("sequence of length {len} is too short for window {window} + horizon {horizon}")]
    TooShort {
        len: usize,
        window: usize,
        horizon: usize,
    },
    #[error("window and horizon must be positive")]
    EmptyWindow,
    #[error("cannot sample from an empty pool")]
    EmptyPool,
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("failed to read corpus: {0}")]
    Io(String),
}

/// The four periodic training functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionKind {
    Sine,
    Sawtooth,
    Square,
    Composite,
}

impl FunctionKind {
    pub const ALL: [FunctionKind; 4] = [
        FunctionKind::Sine,
        FunctionKind::Sawtooth,
        FunctionKind::Square,
        FunctionKind::Composite,
    ];

    pub fn period(self) -> f64 {
        match self {
            FunctionKind::Sine => 2.0 * PI,
            FunctionKind::Sawtooth => PI,
            FunctionKind::Square => 4.0,
            FunctionKind::Composite => 4.0 / 3.0 * PI,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FunctionKind::Sine => "sine",
            FunctionKind::Sawtooth => "sawtooth",
            FunctionKind::Square => "square",
            FunctionKind::Composite => "composite",
        }
    }
}

impl fmt::Display for FunctionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Mathematical signum with `sgn(0) = 0`.
fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn function_value(kind: FunctionKind, x: f64) -> f64 {
    match kind {
        FunctionKind::Sine => x.sin(),
        FunctionKind::Sawtooth => -1.0 + 2.0 * (x.rem_euclid(PI) / PI),
        FunctionKind::Square => signum0((PI / 2.0 * x).sin()),
        FunctionKind::Composite => ((1.5 * x).sin() + (4.5 * x).sin()) * (2.0 / 3.0),
    }
}

/// Raw sampled function: abscissae and (possibly noisy) values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSequence {
    pub xs: Vec<f64>,
    pub values: Vec<f64>,
}

/// Samples `n` points starting at `x0` with spacing `dx`.
///
/// Noise is uniform in `[-noise_amp, noise_amp]`, drawn once per point. With
/// `noise_amp == 0` the generator consumes no randomness.
pub fn generate_sequence(
    kind: FunctionKind,
    x0: f64,
    n: usize,
    dx: f64,
    noise_amp: f64,
    rng: &mut RngStream,
) -> Result<RawSequence, DataError> {
    if n < 2 {
        return Err(DataError::TooFewPoints(n));
    }
    if !(dx > 0.0) {
        return Err(DataError::NonPositiveSpacing(dx));
    }
    if !(0.0..=1.0).contains(&noise_amp) {
        return Err(DataError::NoiseOutOfRange(noise_amp));
    }
    let xs: Vec<f64> = (0..n).map(|i| x0 + i as f64 * dx).collect();
    let values = xs
        .iter()
        .map(|&x| {
            let clean = function_value(kind, x);
            if noise_amp > 0.0 {
                clean + noise_amp * rng.uniform(-1.0, 1.0)
            } else {
                clean
            }
        })
        .collect();
    Ok(RawSequence { xs, values })
}

/// One windowed function sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub xs: Vec<f64>,
    pub values: Vec<f64>,
    pub window: usize,
    pub horizon: usize,
}

impl SequenceSample {
    pub fn input(&self) -> &[f64] {
        &self.values[..self.window]
    }

    pub fn target(&self) -> &[f64] {
        &self.values[self.window..]
    }
}

/// Overlapping stride-1 `(input, target)` windows over `values`.
pub fn make_windows(
    values: &[f64],
    window: usize,
    horizon: usize,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>, DataError> {
    if window == 0 || horizon == 0 {
        return Err(DataError::EmptyWindow);
    }
    if values.len() < window + horizon {
        return Err(DataError::TooShort {
            len: values.len(),
            window,
            horizon,
        });
    }
    Ok((0..=values.len() - window - horizon)
        .map(|j| {
            (
                values[j..j + window].to_vec(),
                values[j + window..j + window + horizon].to_vec(),
            )
        })
        .collect())
}

pub fn sample_batch<'a, T>(
    pool: &'a [T],
    batch_size: usize,
    rng: &mut RngStream,
) -> Result<Vec<&'a T>, DataError> {
    if pool.is_empty() {
        return Err(DataError::EmptyPool);
    }
    if batch_size == 0 {
        return Err(DataError::EmptyBatch);
    }
    Ok((0..batch_size)
        .map(|_| &pool[rng.below(pool.len() as u64) as usize])
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    Abab,
    Lorem,
    /// Loaded from a file.
    Custom,
}

pub const LOREM_IPSUM: &str = "lorem ipsum dolor sit amet, consectetur adipiscing elit, sed do \
eiusmod tempor incididunt ut labore et dolore magna aliqua. ut enim ad minim veniam, quis \
nostrud exercitation ullamco laboris nisi ut aliquip ex ea commodo consequat. duis aute irure \
dolor in reprehenderit in voluptate velit esse cillum dolore eu fugiat nulla pariatur. excepteur \
sint occaecat cupidatat non proident, sunt in culpa qui officia deserunt mollit anim id est laborum.";

const ABAB_REPEATS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextCorpus {
    pub kind: CorpusKind,
    pub text: Vec<char>,
    pub alphabet: Vec<char>,
}

impl TextCorpus {
    pub fn abab() -> Self {
        Self::from_text(CorpusKind::Abab, &"ab".repeat(ABAB_REPEATS)).expect("non-empty")
    }

    pub fn lorem() -> Self {
        Self::from_text(CorpusKind::Lorem, LOREM_IPSUM).expect("non-empty")
    }

    /// Builds a corpus with its alphabet inferred (sorted, unique).
    pub fn from_text(kind: CorpusKind, text: &str) -> Result<Self, DataError> {
        let text: Vec<char> = text.chars().collect();
        if text.is_empty() {
            return Err(DataError::EmptyCorpus);
        }
        let alphabet = text.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        Ok(Self {
            kind,
            text,
            alphabet,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::Io(e.to_string()))?;
        Self::from_text(CorpusKind::Custom, &text)
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.alphabet.binary_search(&c).ok()
    }

    pub fn one_hot<S: Scalar>(&self, c: char) -> Option<Vector<S>> {
        self.index_of(c).map(|i| Vector::one_hot(self.alphabet.len(), i))
    }

    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }
}

/// A character-prediction sample: `window` one-hot inputs and the one-hot next character.
#[derive(Debug, Clone, PartialEq)]
pub struct TextSample<S> {
    pub inputs: Vec<Vector<S>>,
    pub target: Vector<S>,
    /// Index into the corpus of the first input character.
    pub offset: usize,
}

pub fn text_windows<S: Scalar>(
    corpus: &TextCorpus,
    window: usize,
) -> Result<Vec<TextSample<S>>, DataError> {
    if window == 0 {
        return Err(DataError::EmptyWindow);
    }
    if corpus.len() <= window {
        return Err(DataError::TooShort {
            len: corpus.len(),
            window,
            horizon: 1,
        });
    }
    let encoded: Vec<Vector<S>> = corpus
        .text
        .iter()
        .map(|&c| corpus.one_hot(c).expect("alphabet covers text"))
        .collect();
    Ok((0..corpus.len() - window)
        .map(|j| TextSample {
            inputs: encoded[j..j + window].to_vec(),
            target: encoded[j + window].clone(),
            offset: j,
        })
        .collect())
}

/// All selectable tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Sine,
    Sawtooth,
    Square,
    Composite,
    Abab,
    Lorem,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Sine,
        Task::Sawtooth,
        Task::Square,
        Task::Composite,
        Task::Abab,
        Task::Lorem,
    ];

    pub fn function(self) -> Option<FunctionKind> {
        match self {
            Task::Sine => Some(FunctionKind::Sine),
            Task::Sawtooth => Some(FunctionKind::Sawtooth),
            Task::Square => Some(FunctionKind::Square),
            Task::Composite => Some(FunctionKind::Composite),
            Task::Abab | Task::Lorem => None,
        }
    }

    pub fn corpus(self) -> Option<TextCorpus> {
        match self {
            Task::Abab => Some(TextCorpus::abab()),
            Task::Lorem => Some(TextCorpus::lorem()),
            _ => None,
        }
    }

    pub fn is_text(self) -> bool {
        self.function().is_none()
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Sine => "sine",
            Task::Sawtooth => "sawtooth",
            Task::Square => "square",
            Task::Composite => "composite",
            Task::Abab => "abab",
            Task::Lorem => "lorem",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task `{s}`"))
    }
}
