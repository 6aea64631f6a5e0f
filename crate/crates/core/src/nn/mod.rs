//! Parameter storage and transformer building blocks over `candle_core`.

pub mod fused;
mod layers;
mod store;

pub use layers::{
    gelu_ffn, l2_normalize, log_sigmoid, log_softmax_rows, masked_mean,
    softmax_last, Attention, EncoderBlock, FeedForward, LayerNorm, Linear,
};
pub use store::{Init, ParamStore};
