//! Proportional-fairness allocation, differentiable mechanisms and
//! exploitability measurement for multi-resource sharing.

pub mod datagen;
pub mod diffpf;
pub mod error;
pub mod experiments;
pub mod exploit;
pub mod mechanisms;
pub mod metrics;
pub mod mlp;
pub mod pfsolve;
pub mod profile;
pub mod train;

pub use error::{Error, Result};
pub use profile::{AgentMatrix, Allocation, Bounds, ProblemDims, RequestProfile};
