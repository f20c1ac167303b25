//! Training orchestration: teacher pretraining, student distillation,
//! evaluation, checkpoints.

mod config;
mod eval;
mod log;
mod optim;
mod pipeline;
mod train;

pub use config::{InitMode, TrainConfig};
pub use eval::{evaluate, EvalMetrics, EvalSet};
pub use log::{LogRow, TrainLog};
pub use optim::AdamW;
pub use pipeline::{Pipeline, ScheduleSpec, PIPELINE_FILE, TEXT_FILE, UNET_FILE};
pub use train::{distill_loss, distill_student, micro_batch, train_teacher, MicroBatch, TrainSession, OPTIMIZER_FILE, TRAINER_FILE};
