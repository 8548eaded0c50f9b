//! Federated-learning poisoning simulator with pill-based attack augmentation.

pub mod attacks;
pub mod augment;
pub mod data;
pub mod defenses;
pub mod nn;
pub mod pill;
pub mod rng;
pub mod sim;

pub use nn::{DenseNet, ParamVector, Shape};
pub use sim::{run_experiment, ExperimentConfig};
