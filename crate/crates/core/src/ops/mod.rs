//! Differentiable primitive layers: convolution, normalization, activations,
//! scale-transfer primitives, and channel concatenation.
//!
//! Every operation records a backward rule on the tape; all analytic
//! gradients are audited against the finite-difference oracle in the test
//! suite and by the `gradcheck` command.

mod concat;
mod conv;
mod interp;
mod norm;
mod pointwise;
mod pool;

pub use concat::concat_channels;
pub use conv::{conv2d, Conv2dCfg};
pub use interp::bilinear_upsample;
pub use norm::{batch_norm_eval, batch_norm_train, ema_update, BatchStats, BnCfg};
pub use pointwise::{add, mul, mul_scalar, relu, sigmoid, sum};
pub use pool::{adaptive_avg_pool, avg_pool_down};
