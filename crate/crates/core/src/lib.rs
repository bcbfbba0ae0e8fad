//! Unified multi-task semantic communication over noisy channels.

pub mod adaptation;
pub mod baselines;
pub mod channel;
pub mod container;
pub mod datasets;
pub mod decoder;
pub mod encoders;
pub mod harness;
pub mod error;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod task;
pub mod training;

pub use error::{Error, Result};
pub use task::{Modality, System, TaskId};
