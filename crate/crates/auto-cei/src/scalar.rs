//! Scalar abstraction for the numeric core.
//!
//! Reward shaping, calibration, resampling weights, the curriculum objective
//! and summary statistics are written against [`Scalar`] so they work at any
//! float precision; the pipeline itself runs on [`crate::Real`].

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + core::fmt::Debug + core::fmt::Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, for constants baked into the algorithms.
    fn from_config(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 constant representable in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
