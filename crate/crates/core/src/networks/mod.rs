//! Feature encoder, timestep embedding, and the prototype-conditioned U-Net.

mod encoder;
mod time;
mod unet;

pub use encoder::{Encoder, EncoderCache, DEFAULT_ENCODER_WIDTHS, MIN_ENCODER_SIDE};
pub use time::{sinusoidal, TimeEmbedding};
pub use unet::{
    DownStage, ResBlock, ResCache, UNet, UNetCache, UNetConfig, UpStage, DEFAULT_RES_BLOCKS, DESK_WIDTHS,
    PAPER_WIDTHS,
};
