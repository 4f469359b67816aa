//! Scalar element abstraction: the engine computes in `f32` for training and
//! inference and in `f64` for gradient-check builds.

use std::fmt;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

pub trait Element:
    Float
    + LinalgScalar
    + ScalarOperand
    + std::ops::AddAssign
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}
