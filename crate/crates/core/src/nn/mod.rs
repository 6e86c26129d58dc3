//! Minimal CPU neural-network machinery: parameters, a reverse-mode tape,
//! and the optimizer.

mod conv;
mod graph;
mod kernels;
mod optim;
mod params;

pub use graph::{Graph, NodeId};
pub use optim::{warmup_lr, Adam};
pub use params::{ParamId, ParamStore};

pub(crate) use params::Fnv;

#[cfg(test)]
mod tests;
