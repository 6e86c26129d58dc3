//! Deterministic single-step dense prediction distilled from a diffusion
//! teacher queried as a timestep-indexed ensemble of experts.

pub mod datamix;
pub mod diffusion;
pub mod error;
pub mod evalsuite;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod scenegen;
pub mod task;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use task::Task;
pub use tensor::Tensor;
