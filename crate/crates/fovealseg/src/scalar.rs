//! Scalar abstraction so the numeric core runs in either `f32` or `f64`.
//!
//! Training uses `f32` for throughput; finite-difference gradient checks and
//! the dense sampler oracle run in `f64` where the step sizes involved would
//! otherwise drown in rounding noise.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar used throughout the numeric core.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from `f64` literals and intermediate math.
    fn from_f64_lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to scalar")
    }

    /// Widen to `f64` for accumulation, reporting and serialization.
    fn to_f64_lit(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    fn from_usize_lit(x: usize) -> Self {
        Self::from_usize(x).expect("usize converts to scalar")
    }

    fn half() -> Self {
        Self::from_f64_lit(0.5)
    }

    fn two() -> Self {
        Self::from_f64_lit(2.0)
    }
}

impl Real for f32 {}
impl Real for f64 {}
