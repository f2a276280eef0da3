//! Conditional denoising diffusion over fixed-size scene tensors: schedule,
//! transformer denoiser, training loop and ancestral sampler.

pub mod model;
pub mod sample;
pub mod schedule;
mod tape;
pub mod train;

pub use model::{CondCache, Denoiser, EncodedCondition, ModelConfig};
pub use sample::{ddpm_step, sample_scene, sample_scenes, sample_tensor};
pub use schedule::{make_schedule, normal_matrix, standard_normal, DiffusionSchedule};
pub use train::{train, training_loss, Adam, TrainItem, TrainingConfig};
