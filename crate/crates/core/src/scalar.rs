//! Scalar abstraction shared by every numeric stage of the pipeline.
//!
//! Inference runs in `f32`; gradient checks and reference computations run in
//! `f64`. Everything that does arithmetic is written against [`Real`].

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Send + Sync + 'static
{
    /// Converts an `f64` literal, panicking only for values the type cannot hold.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal out of range for scalar type")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Cast between scalar types (`f32` <-> `f64`).
    #[inline]
    fn cast<U: Real>(self) -> U {
        U::lit(self.to_f64_lossy())
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub(crate) fn cast_slice<T: Real, U: Real>(src: &[T]) -> Vec<U> {
    src.iter().map(|v| v.cast()).collect()
}
