//! Patch attention forecaster.
//!
//! Each decomposed channel gets its own model. A lookback window is
//! instance-normalized, padded at the end with `stride` copies of its last
//! value, cut into overlapping patches, linearly embedded with a learned
//! positional term, passed through post-norm self-attention encoder layers,
//! flattened and projected to the horizon, and finally de-normalized.

mod config;
mod model;
mod prep;
mod train;

pub use config::{patch_count, ForecasterConfig, NormKind};
pub use model::{ForecastModel, Mode, RunningStats, StepOutput};
pub use prep::{
    embed, instance_denormalize, instance_normalize, patchify, InstanceStats, STD_FLOOR,
};
pub use train::{
    train_epoch, ChannelWindows, EpochStats, JointTrainer, LossWeighting, TrainingConfig,
};
