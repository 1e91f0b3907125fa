//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits as nt;

/// Real floating-point type the pipeline can be instantiated with (`f32`, `f64`
/// or quad-precision `f128`).
pub trait Scalar:
    nt::Float
    + nt::FloatConst
    + nt::FromPrimitive
    + nt::ToPrimitive
    + nt::NumAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    /// Larger of two values, ignoring a NaN operand. Uses `PartialOrd` rather
    /// than `Float::max`, which some extended-precision types get wrong.
    #[inline]
    fn fmax(self, other: Self) -> Self {
        if self.is_nan() || other > self {
            other
        } else {
            self
        }
    }

    /// Smaller of two values, ignoring a NaN operand.
    #[inline]
    fn fmin(self, other: Self) -> Self {
        if self.is_nan() || other < self {
            other
        } else {
            self
        }
    }

    /// Widens to `f64` (used for serialization and reporting).
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// IEEE binary128, used where `f64` rounding would swamp a finite-difference
/// comparison.
impl Scalar for f128::f128 {}
