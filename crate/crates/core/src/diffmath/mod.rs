//! Dense arrays, reverse-mode differentiation and the two optimizers used
//! for training.

mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

pub mod nn;

pub use gradcheck::{
    check_params, compare_gradients, finite_difference_check, numeric_gradient, sample_coords,
    GradCheckReport, DEFAULT_STEP,
};
pub use graph::{Gradients, Graph, Var};
pub use optim::{OptimizerMode, OptimizerState, ADAM_BETAS, ADAM_EPS, DEFAULT_POLY_POWER};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

pub(crate) use graph::{resize_forward, softmax_tensor};
