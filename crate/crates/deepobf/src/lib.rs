//! CNN structure obfuscation toolkit: replaces the feature extractor of a
//! trained network with a shallow sequential simulation block learned by
//! joint hint+label distillation, then measures what the swap costs (size,
//! time, accuracy) and what it buys (reduced structural leakage, degraded
//! fine-tuning ability).

pub mod analyzer;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod graph;
pub mod loss;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
