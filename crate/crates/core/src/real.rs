use std::fmt;

use num_traits::Float;

/// Floating-point substrate for all tensor math.
///
/// `f32` is the training default; `f64` is mandatory for the finite-difference
/// gradient suites. Everything downstream (tensors, tape, model, trainer) is
/// generic over this trait so the two precisions share one code path.
pub trait Real:
    Float + num_traits::NumAssignOps + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const NAME: &'static str;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
