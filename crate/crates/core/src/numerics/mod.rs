//! Dense `f32` tensors, a reverse-mode tape, and the AdamW optimizer.

pub mod functional;
pub mod kernels;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use functional::{kl_divergence, softmax};
pub use optim::{adamw_step, clip_grad_norm, lr_schedule, AdamWConfig, OptimizerState, ParamSet};
pub use tape::{AttnSpec, Grads, Packing, Tape, Var, LOG_EPS, PROB_EPS};
pub use tensor::Tensor;
