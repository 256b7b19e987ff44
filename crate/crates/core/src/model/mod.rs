//! Small trainable encoders with a projection head and exact backward passes.

mod encoder;
mod layers;
mod params;
mod transformer;


use serde::{Deserialize, Serialize};

pub use encoder::{
    BackboneConfig, Encoder, EncoderConfig, EncoderOutput, ForwardCache, Representation,
};
pub use layers::{relu, relu_backward, LayerNorm, Linear, Norm, NormKind, NORM_EPS};
pub use params::{Layout, ParamId, TensorSpec};
pub use transformer::TransformerConfig;

/// Train mode uses batch statistics in the head; eval mode uses running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}
