//! Actor detector with a keyframe encoder, a clip encoder and three
//! adversarially trained domain discriminators.

pub mod adaptation;
pub mod data;
pub mod detector;
pub mod discriminators;
pub mod encoders;
pub mod error;
pub mod grl;
pub mod params;
pub mod train;

pub use adaptation::{AdaptationConfig, LossBundle, ModuleFlags};
pub use detector::{ActionDetector, AnchorConfig, DetectionLosses, HeadConfig, ModelConfig};
pub use encoders::{EncoderConfig, FeatureMaps};
pub use error::{ModelError, Result};
pub use grl::{grl, GrlConfig};
pub use params::ParamStore;
pub use train::{train_phase, OptimizerKind, Phase, TrainConfig};
