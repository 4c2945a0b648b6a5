//! Multi-task representation learning with shared-information maximization
//! and task-specific information minimization, together with loss-weighting
//! and gradient-surgery baselines and an evaluation toolkit.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod exec;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod objectives;
pub mod rng;
pub mod robustness;
pub mod trainer;
pub mod weighting;

pub use error::{Error, Result};
