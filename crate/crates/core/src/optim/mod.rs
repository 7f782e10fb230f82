//! AdamW and Adamax with decoupled weight decay, and the epoch training loop.

mod adam;
mod train;

pub use adam::{clip_global_norm, Hyper, OptimizerKind, OptimizerState};
pub use train::{
    checkpoint_path, read_run, split_lessons, train, write_run, EpochCheckpoint, LessonSplit,
    RunManifest, TrainConfig, TrainOutcome,
};
