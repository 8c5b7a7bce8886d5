//! Optimization, schedules, metrics, checkpoints and the training loop.

pub mod adam;
pub mod checkpoint;
pub mod evaluate;
pub mod metrics;
pub mod schedule;
pub mod trainer;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use evaluate::{evaluate, infer, mean_scores, reflect_pad, score_pair, PairScore};
pub use metrics::{psnr, ssim, PSNR_CAP};
pub use schedule::{Phase, Schedule};
pub use trainer::{EpochLog, Growth, TrainConfig, TrainLog, Trainer, LOG_HEADER};
