//! The multi-scale encoder, prompt decoder and fusion decoder.

pub mod checkpoint;
pub mod config;
pub mod gates;
pub mod model;
pub mod ops;
pub mod params;

pub use checkpoint::Checkpoint;
pub use config::NetworkConfig;
pub use model::{
    fuse, BatchLoss, FusionNet, GuidanceTensors, ImageExample, MultiScaleFeatures, PredictionBundle,
    PromptExample,
};
pub use params::{count_parameters, Init, ParamEntry, ParamLayout};
