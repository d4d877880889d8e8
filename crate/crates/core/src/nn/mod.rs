//! Layers with explicit forward caches and backward passes.
//!
//! Every `backward` accumulates into the layer's parameter gradients and
//! returns the gradient with respect to the layer input.

mod activation;
mod attention;
mod conv;
mod linear;
mod norm;

pub use activation::{concat_channels, silu, silu_backward, split_channels, upsample2, upsample2_backward};
pub use attention::{AttentionCache, CrossAttention, DEFAULT_HEADS};
pub use conv::{Conv2d, ConvCache};
pub use linear::Linear;
pub use norm::{GroupNorm, NormCache, GROUP_SIZE};
