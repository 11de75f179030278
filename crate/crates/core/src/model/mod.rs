//! Forward pass of the multi-modal temporal-spatial vision transformer.
//! Inference only; weights come from seeded initialization or a saved
//! parameter set.

mod config;
mod forward;
mod ops;
mod params;

use thiserror::Error;

pub use config::{CrossAttention, ModelConfig, PositionalEmbedding};
pub use forward::{
    decode_fuse, encode_spatial, encode_temporal, forward, forward_tiled, fold_pixels, segment_head, tokenize,
    unfold_pixels, InputStack, Logits, Stream, TokenTensor,
};
pub use ops::{attention, encoder_layer, gelu, layer_norm, linear, mlp, AttentionOutput, Scope};
pub use params::{
    param_count, Attention, DecoderLayer, EncoderLayer, EncoderSet, Init, LayerNorm, Linear, Mlp, Module, ParamSet,
    Tensor,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("layout mismatch: {0}")]
    Layout(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;
