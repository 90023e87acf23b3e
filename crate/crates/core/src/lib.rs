//! Federated multi-modal regression with contrastive, mutual-information and
//! modality-alignment regularizers, plus linear reduction baselines.

pub mod baselines;
pub mod datagen;
pub mod error;
pub mod fedsim;
pub mod harness;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
