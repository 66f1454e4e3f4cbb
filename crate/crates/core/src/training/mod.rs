//! Toy-scale distillation training.

pub mod adam;
pub mod config;
pub mod data;
pub mod loss;
pub mod mixup;
pub mod schedule;
pub mod toy;
pub mod trainer;

pub use adam::{Adam, AdamConfig};
pub use config::{RunConfig, TrainConfig};
pub use data::{Clip, Dataset, Sampler, UniformSampler};
pub use loss::{kd_loss, kd_loss_value, teacher_targets};
pub use mixup::{mixup, KdBatch};
pub use schedule::{lr_at, tau_at, ScheduleConfig};
pub use trainer::{train_loop, EpochRecord, StepRecord, Trace};
