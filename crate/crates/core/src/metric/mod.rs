//! Learned perceptual distance: conv feature extractor, weighted deep
//! feature L1, calibration head and training.

mod checkpoint;
mod net;
mod pool;
mod scalar;
mod train;

pub use checkpoint::{
    checkpoint_json, load_checkpoint, model_from_json, save_checkpoint, CHECKPOINT_VERSION,
};
pub use net::{bce, leaky, FeatureMap, FeatureStack, MetricModel, NetConfig, BCE_CLAMP};
pub use scalar::Scalar;
pub use train::{
    invert_demo, pretrain_surrogate, pretrain_surrogate_with_head, project, surrogate_corpus, Adam,
    EpochStats, InversionResult, LabeledClip, SurrogateHead, TrainConfig, TrainMode, TrainPair,
    Trainer,
};
