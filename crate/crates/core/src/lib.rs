//! Pure compute core for decoder-only speech-to-text modelling: a small
//! reverse-mode autodiff engine, CTC loss and compression, transformer
//! building blocks, LoRA, beam search and BLEU.
//!
//! The crate is `no_std` + `alloc`; the `std` feature only switches the
//! float math backend. File formats, configuration and the command line
//! live in the companion `speechlm` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod bridge;
pub mod compressor;
pub mod corpus;
pub mod ctc;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod lora;
pub mod mask;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod param;
pub mod search;
pub mod seq2seq;
pub mod tensor;
pub mod textlm;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use mask::AttentionMask;
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::{DType, Scalar, Tensor};
