//! Noise schedules, forward diffusion, training objectives and samplers.

mod losses;
mod sampling;
mod schedule;

pub use losses::{feature_kd_loss, mse, output_kd_loss, task_loss, total_loss, weighted_total, LossBreakdown, LossWeights};
pub use sampling::{
    denoise_from, guided_eps, sample, sample_traced, sdedit, timestep_grid, SamplerConfig, SamplerKind, StepCapture,
};
pub use schedule::{forward_diffuse, make_schedule, NoiseSchedule, ScheduleKind};
