//! Files, training loop and experiment pipeline for the speech translation
//! models in `speechlm-core`.

pub mod checkpoint;
pub mod config;
pub mod corpus_io;
pub mod decode;
pub mod error;
pub mod matrix;
pub mod pipeline;
pub mod trainer;

pub use error::{Error, Result};
