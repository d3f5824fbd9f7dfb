//! Scalar abstraction: the model runs in f32 for training and f64 for
//! gradient-check builds; everything numeric is generic over this trait.

use num_traits::{Float, NumAssign};
use std::fmt::Debug;

pub trait Scalar: Float + NumAssign + Debug + Default + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
