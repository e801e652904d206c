//! Training, evaluation and reporting for world-model agents on the
//! hidden-order grid task.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod trainer;

pub use config::{Horizon, RunConfig};
pub use error::{LabError, Result};
pub use trainer::Trainer;
