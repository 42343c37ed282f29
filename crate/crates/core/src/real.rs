use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

/// Floating-point element type for maps, networks and losses.
///
/// Training runs in `f32`; gradient checks run the same code in `f64`.
pub trait Real:
    Float + FromPrimitive + LinalgScalar + ScalarOperand + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("representable literal")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
