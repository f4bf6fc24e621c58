//! Scalar abstraction: every numeric routine in this crate is generic over a
//! floating-point type so the same code serves `f64` verification paths and
//! `f32` training hot paths.

use std::fmt::{Debug, Display};

/// Floating-point scalar usable throughout the crate: `f32` or `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssignOps
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + serde::Serialize
    + serde::de::DeserializeOwned
    + 'static
{
    /// Lossy conversion from `f64`; the canonical way constants and
    /// RNG draws (always produced in `f64`) enter generic code.
    fn from_f64(x: f64) -> Self;

    /// Widening conversion used by accumulators and reporting.
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Shorthand for `R::from_f64` at call sites heavy with constants.
#[inline]
pub fn r<R: Real>(x: f64) -> R {
    R::from_f64(x)
}
