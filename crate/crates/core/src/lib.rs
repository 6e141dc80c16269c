//! AutoTCL: automatic time-series contrastive learning with factorized augmentation.

pub mod augment;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod trainer;

pub use config::{ExperimentConfig, Variant};
pub use error::{Error, Result};
