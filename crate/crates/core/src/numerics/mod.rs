//! Minimal reverse-mode differentiable numerics in 64-bit floats.

mod gradcheck;
mod graph;
mod init;
mod kernels;
mod layers;
mod optim;
mod param;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{prefix_len, BatchNormParams, Graph, GruHandles, Mode, NodeId};
pub use init::{derive_seed, xavier_bound, xavier_init, xavier_shaped};
pub use kernels::conv_out_len;
pub use layers::{
    activation, batchnorm_forward, bce_loss, bigru_forward, conv2d_forward, dense_forward,
    masked_softmax, Activation, BatchNormMode, GruParams,
};
pub use optim::Adam;
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

/// Leaky ReLU negative slope used throughout the model.
pub const LEAKY_RELU_ALPHA: f64 = 0.01;
/// Probability clamp applied before the logarithms of the BCE loss.
pub const BCE_CLAMP_EPS: f64 = 1e-7;
