//! Tensor building blocks shared by encoders and the decoder.

pub mod flops;
mod layers;
pub mod ops;
mod params;

pub use layers::{
    drop_path_schedule, BatchNorm2d, Conv2d, ConvModule, ConvOpts, DropPath, Dropout, LayerNorm,
    LayerNorm2d, Linear, NoiseRng,
};
pub use params::{Init, ParamBuilder, ParamStore};
