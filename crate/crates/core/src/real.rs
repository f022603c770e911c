use std::fmt::Debug;

use num_traits::Float;

/// Scalar type the differentiable kernels are generic over.
///
/// Storage everywhere is `f32`; `f64` exists so gradient checks can run with
/// finite differences that are not swamped by rounding.
pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    fn erf(self) -> Self;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}
