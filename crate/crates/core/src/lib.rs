pub mod cli;
pub mod critic;
pub mod error;
pub mod featurize;
pub mod hyperformer;
pub mod latent;
mod layers;
pub mod model;
pub mod msa;
pub mod protocols;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod trim;
pub mod verify;

pub use error::{Error, Result};
