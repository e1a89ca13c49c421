//! Convolutional building blocks and the residual classifier.

pub mod checkpoint;
mod conv;
mod resnet;

pub use conv::{conv2d_forward, partial_scale_map, Conv2dSpec, PaddingMode};
pub use resnet::{
    forward_layers, mini_resnet_forward, Affine, Architecture, Block, Layers, MiniResNetParams, Projection,
    ResNetOutput, BLOCKS_PER_STAGE, FEATURE_DIM, MIN_INPUT_SIZE, STAGE_WIDTHS,
};
