//! Floating point element type shared by every tensor and model in the crate.

use std::fmt::{Debug, Display};

/// Left-to-right sum; `Scalar` does not require `std::iter::Sum`.
pub fn sum<F: Scalar>(values: impl IntoIterator<Item = F>) -> F {
    values.into_iter().fold(F::zero(), |a, b| a + b)
}

/// Real scalar the engine computes in: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Width tag written into logs and diagnostics.
    const NAME: &'static str;

    /// Converts an `f64` literal; exact for `f64`, nearest-rounded for `f32`.
    fn lit(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    fn to_f32_lossy(self) -> f32;

    fn from_f32(v: f32) -> Self;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self
    }

    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }

    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self as f32
    }

    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
}
