//! 3D shifted-window video transformer for ejection-fraction regression
//! from echocardiogram clips.

pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod fsutil;
pub mod model;
pub mod nn;
pub mod params;
pub mod patch_embed;
pub mod preprocessing;
pub mod regressor;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod window_attention;

pub use encoder::{Encoder, ModelConfig};
pub use error::{Error, Result};
pub use model::UltraSwin;
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{Real, TokenGrid, Video};
