//! Transformer denoiser predicting `p(x̂_0 | x_t)`.

pub mod config;
pub mod loss;
pub mod model;
pub(crate) mod ops;
pub mod params;

pub use config::{default_positional, DenoiserConfig, HeadKind, PositionalKind, TimeInjection};
pub use loss::{loss_and_grad, loss_and_grad_at, loss_at, LossGrad};
pub use model::{backward, forward, forward_steps, predict, predict_steps, time_embedding, ForwardTrace, Head};
pub(crate) use ops::softmax_backward_row as softmax_backward;
pub use params::{init_params, DenoiserParams, Layout, TensorSpec};
