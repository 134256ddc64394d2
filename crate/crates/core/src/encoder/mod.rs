//! Teacher/student encoder: interleaved conv and attention stages, a
//! projection head, the student-only predictor, and weighted aggregation of
//! attention layer outputs for downstream heads.

mod config;
mod model;

pub use config::{
    conv_out_len, conv_padding, Activation, Aggregate, AttnSpec, ConvSpec, EncoderConfig, LayerSpec, PAPER_PRESET,
    TINY_PRESET,
};
pub use model::{aggregate_layers, forward_macs, resample_index, Bound, Encoder, EncoderOutput, ParamSet, Role};
