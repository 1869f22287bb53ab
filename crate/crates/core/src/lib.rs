//! Trimodal (brain, visual, textual) variational autoencoder with
//! mutual-information regularisers for zero-shot decoding of visual
//! categories from fMRI responses.

pub mod cli;
pub mod datamodel;
pub mod decode;
pub mod error;
pub mod gaussian;
pub mod nets;
pub mod objectives;
pub mod preprocess;
pub mod train;

pub use error::{Error, Result};
