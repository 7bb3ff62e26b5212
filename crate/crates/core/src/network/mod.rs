//! Fully convolutional encoder-decoder trained from scratch.

pub mod arch;
pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod tensor;

pub use arch::{parse_pairs, ArchConfig, StageShape};
pub use checkpoint::{load_model, load_model_with_meta, save_model, save_model_with_meta};
pub use layers::{
    conv2d_backward, conv2d_valid, crop_concat, crop_concat_backward, dropout, maxpool2x2, maxpool2x2_backward, relu,
    relu_backward, softmax, spatial_dropout, upsample_nearest2x, upsample_nearest2x_backward, ConvParams, DropoutKind,
    DropoutMask, PoolIndices,
};
pub use model::{backward, forward, xavier_init, ForwardTrace, Mode, ParamSet};
pub use tensor::Tensor;
