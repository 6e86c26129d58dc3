//! Teacher and student networks, tap extraction and projection heads.

mod checkpoint;
mod config;
mod heads;
mod predictor;
mod unet;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, load_teacher, read_metadata, save_checkpoint,
    save_teacher, Container, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::NetworkConfig;
pub use heads::ProjectionMode;
pub use predictor::{PredictorState, TapBundle, TapSource, Teacher};
pub use unet::{timestep_embedding, timestep_embeddings};

use crate::diffusion::NoiseSchedule;
use crate::error::Result;
use crate::task::Task;
use crate::tensor::Tensor;

pub fn build_teacher(config: &NetworkConfig, seed: u64) -> Result<Teacher> {
    Teacher::build(config, seed)
}

pub fn build_student(
    config: &NetworkConfig,
    task: Task,
    teacher: &Teacher,
    projection: ProjectionMode,
    seed: u64,
) -> Result<PredictorState> {
    PredictorState::from_teacher(config, task, teacher, projection, seed)
}

pub fn student_forward(state: &PredictorState, x: &Tensor) -> Result<(Tensor, TapBundle)> {
    state.forward(x)
}

pub fn teacher_forward(
    teacher: &Teacher,
    x: &Tensor,
    eps: &Tensor,
    timesteps: &[usize],
    sched: &NoiseSchedule,
) -> Result<TapBundle> {
    teacher.taps(x, eps, timesteps, sched)
}

pub fn project(state: &PredictorState, taps: &TapBundle, timesteps: &[usize]) -> Result<TapBundle> {
    state.project(taps, timesteps)
}
