//! Training, evaluation, gradient checking and adversarial attacks for
//! decoupled networks on MNIST and CIFAR-10.

pub mod attack;
pub mod augment;
pub mod check;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod metrics;
pub mod train;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
