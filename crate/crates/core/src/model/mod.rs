//! Denoiser, noise schedule, training and checkpoints.

pub mod checkpoint;
pub mod schedule;
pub mod train;
pub mod unet;

pub use checkpoint::Checkpoint;
pub use schedule::{cfg_epsilon, ddim_step, NoiseSchedule, ScheduleConfig};
pub use train::{
    condition_dropout, training_step, training_step_with, Adam, Ema, PredictInput, StepOutput, TrainConfig,
    TrainExample, Trainer,
};
pub use unet::{build_unet, expected_param_count, timestep_embedding, unet_forward, UNetConfig};
