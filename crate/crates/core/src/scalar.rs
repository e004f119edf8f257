//! Scalar abstraction so the whole pipeline runs in f32 (production) or f64
//! (gradient checks) through the same code paths.

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar for tensors, geometry and training.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Default + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    /// Lossy conversion to f32 for checkpoint storage.
    fn to_f32_lossy(self) -> f32;
    /// Conversion from checkpoint f32 storage.
    fn from_f32_exact(v: f32) -> Self;
}

impl Scalar for f32 {
    fn to_f32_lossy(self) -> f32 {
        self
    }
    fn from_f32_exact(v: f32) -> Self {
        v
    }
}

impl Scalar for f64 {
    fn to_f32_lossy(self) -> f32 {
        self as f32
    }
    fn from_f32_exact(v: f32) -> Self {
        v as f64
    }
}

/// Shorthand for converting an f64 literal into the active scalar type.
#[inline]
pub fn lit<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("literal representable in scalar type")
}
