//! Floating-point scalar abstraction for the numeric core.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the numeric core is generic over: `f32` or `f64`.
///
/// All shipped tolerances are calibrated for `f64`, which the crate-root
/// type aliases fix. `f32` instantiations work at correspondingly looser
/// accuracy.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Send + Sync + 'static
{
    /// Converts from `f64`, rounding to the nearest representable value.
    fn from_f64_lossy(value: f64) -> Self {
        <Self as FromPrimitive>::from_f64(value).expect("finite f64 must convert")
    }

    /// Converts from `usize`, rounding to the nearest representable value.
    fn from_usize_lossy(value: usize) -> Self {
        <Self as FromPrimitive>::from_usize(value)
            .unwrap_or_else(|| Self::from_f64_lossy(value as f64))
    }

    /// Converts to `f64` at reporting and serialization boundaries.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
