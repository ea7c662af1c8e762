//! Small reverse-mode autodiff engine over `ndarray` tensors.
//!
//! Every backward rule is written in terms of differentiable operations, so a
//! gradient computed with `create_graph = true` is itself a [`Var`] that can be
//! differentiated again. Training objectives that penalize input gradients
//! (for example a Wasserstein critic's gradient penalty) need exactly this.
//!
//! Tensors are `f64` and image batches use the NCHW layout throughout.

mod backward;
pub mod gradcheck;
mod ops;
mod var;

pub use backward::{backward_all, grad};
pub use ops::conv::{conv2d, conv2d_weight_grad, conv_transpose2d, output_size};
pub use ops::resample::resample;
pub use ops::pool::max_pool2d;
pub use var::{is_grad_enabled, no_grad, Var};

/// Owned dynamic-rank tensor used as the value of every [`Var`].
pub type Tensor = ndarray::ArrayD<f64>;
