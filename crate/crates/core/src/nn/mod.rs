//! Layers, the convolutional encoder and MLP heads.

mod encoder;
mod layers;
mod mlp;

pub use encoder::{Block, BlockKind, Encoder, EncoderConfig};
pub use layers::{
    copy_state, BatchNorm, Buffer, Conv2d, Linear, Mode, Module, BN_EPS, BN_MOMENTUM,
};
pub use mlp::{Mlp, MlpConfig};
