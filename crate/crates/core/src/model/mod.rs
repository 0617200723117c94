//! The implicit function `f`, its training losses, analytic gradients and
//! the optimizer.

mod adam;
mod loss;
mod mlp;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use loss::{
    bce_loss, bce_with_logits, disparity_loss, disparity_pyramid, pool_valid, sigmoid, smooth_l1,
    smooth_l1_grad, LossWeights, BCE_EPS,
};
pub use mlp::{Mlp, MlpCache, MlpGrad};
pub use params::{NamedArray, ParamGroup};
