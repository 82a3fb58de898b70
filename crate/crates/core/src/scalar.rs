//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;
pub use twofloat::TwoFloat;

/// Element type of matrices, vectors and parameters.
///
/// Implemented for `f32`, `f64` and the double-double [`TwoFloat`], which
/// gradient checks use to evaluate finite differences.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant into this scalar type (rounding for `f32`).
    fn of(x: f64) -> Self;

    /// Converts to `f64`; exact for `f32` and `f64`, rounded for [`TwoFloat`].
    fn as_f64(self) -> f64;

    /// Left-to-right sum starting from zero.
    fn total(values: impl IntoIterator<Item = Self>) -> Self {
        values.into_iter().fold(Self::zero(), |acc, v| acc + v)
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for TwoFloat {
    #[inline]
    fn of(x: f64) -> Self {
        TwoFloat::from(x)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.hi() + self.lo()
    }
}
