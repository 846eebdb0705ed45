//! Gradient estimators for discrete latent-variable models.

pub mod data;
pub mod dvae;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod gumbel;
pub mod structured;
pub mod tensor;

pub use error::{Error, Result};
