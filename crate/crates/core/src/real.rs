//! Floating-point element types usable by the differentiable ops.
//!
//! Production training runs in `f32`; gradient checks run the same code in
//! `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Element type of [`Tensor5`](crate::voxelgrid::Tensor5) and every op built on it.
pub trait Real:
    Float + Default + Debug + Display + Send + Sync + AddAssign + SubAssign + MulAssign + Sum + 'static
{
    /// Lossy conversion from `f64`.
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Magnitudes below this are flushed to zero by [`Real::flush`]; the
    /// square root of the smallest normal value.
    const FLUSH_BELOW: Self;

    /// Zero for tiny values, so that products with them stay normal.
    #[inline]
    fn flush(self) -> Self {
        if self.abs() < Self::FLUSH_BELOW {
            Self::zero()
        } else {
            self
        }
    }
}

impl Real for f32 {
    const FLUSH_BELOW: f32 = 1.084_202_2e-19;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const FLUSH_BELOW: f64 = 1.491_668_146_240_041_3e-154;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
