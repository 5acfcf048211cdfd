//! Scalar abstraction for the numeric core.
//!
//! Grid predictions, the losses and the little conv net are generic over
//! [`Real`] so the same code runs in `f32` on the production path and in
//! `f64` where finite-difference verification needs the extra precision.
//! Pixel-frame geometry (tiling, fusion, matching) stays `f64` throughout.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar: `f32` or `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Narrowing conversion from `f64`.
    #[inline]
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts to scalar")
    }

    /// Widening conversion to `f64`.
    #[inline]
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
