// Negated comparisons are how validation rejects NaN alongside bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod lstm;
pub mod metrics;
pub mod model_io;
pub mod params;
pub mod pipeline;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vit;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::Tensor;
