//! Diverse audio captioning with a noise-conditioned encoder-decoder
//! generator trained against naturalness and semantic discriminators plus a
//! CIDEr language evaluator.

pub mod container;
pub mod corpus;
pub mod discriminators;
pub mod error;
pub mod features;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
