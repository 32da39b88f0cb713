//! Scalar abstraction.
//!
//! Every numerical kernel in this crate is generic over the floating-point
//! type through the [`Real`] trait. `f64` is the working precision for the
//! shipped tooling (the test-suite tolerances assume it); `f32` is available
//! for storage-constrained experiments.

use num_traits::{Float, FloatConst, FromPrimitive};

/// Floating-point scalar used throughout the library.
pub trait Real:
    Float + FloatConst + FromPrimitive + core::fmt::Debug + core::fmt::Display + Send + Sync + 'static
{
    /// Conversion from an `f64` literal. Panics only if the value is not
    /// representable at all, which cannot happen for the finite constants
    /// this crate feeds it.
    #[inline]
    fn of(value: f64) -> Self {
        Self::from_f64(value).expect("finite f64 constant")
    }

    /// Conversion from a grid count.
    #[inline]
    fn of_usize(value: usize) -> Self {
        Self::from_usize(value).expect("representable usize")
    }

    /// Lossy view as `f64`, used when attaching values to error reports.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions_round_trip() {
        assert_eq!(f64::of(0.25), 0.25);
        assert_eq!(f32::of(0.25), 0.25_f32);
        assert_eq!(f64::of_usize(12), 12.0);
        assert_eq!(2.0_f64.as_f64(), 2.0);
    }
}
