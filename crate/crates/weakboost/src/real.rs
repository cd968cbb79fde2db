use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar used by every kernel: `f32` or `f64`.
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into the working scalar.
#[inline(always)]
pub fn lit<F: Real>(v: f64) -> F {
    F::from_f64(v).expect("representable literal")
}

#[inline(always)]
pub fn to_f64<F: Real>(v: F) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Standard normal cumulative distribution function.
#[inline]
pub fn norm_cdf<F: Real>(x: F) -> F {
    lit(0.5 * statrs::function::erf::erfc(-to_f64(x) / std::f64::consts::SQRT_2))
}

/// Standard normal quantile.
pub fn norm_inv(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().inverse_cdf(p)
}
