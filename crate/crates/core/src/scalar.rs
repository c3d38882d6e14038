//! Scalar abstraction shared by every numerical routine in the crate.
//!
//! All linear algebra is written against [`Scalar`], which is satisfied by
//! `f32` and `f64`. Tolerances quoted in the test-suite assume `f64`.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real floating-point field usable by the GP routines.
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Display + Debug + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal into the scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 literal representable in scalar type")
    }

    /// Converts an integer count into the scalar type.
    #[inline]
    fn count(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("count representable in scalar type")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn magnitude(self) -> Self {
        if self < Self::zero() {
            -self
        } else {
            self
        }
    }

    #[inline]
    fn finite(self) -> bool {
        self.to_f64_lossy().is_finite()
    }

    #[inline]
    fn ln_2pi() -> Self {
        Self::lit((2.0 * std::f64::consts::PI).ln())
    }
}

impl<T> Scalar for T where
    T: RealField
        + Copy
        + FromPrimitive
        + ToPrimitive
        + Display
        + Debug
        + Default
        + Send
        + Sync
        + 'static
{
}
