//! Compression toolkit for small BERT-shaped encoders.
//!
//! The crate bundles a reverse-mode autodiff tensor ([`tensor`]), the encoder
//! itself ([`model`]), first-order Taylor structured pruning ([`pruning`]),
//! SVD embedding factorization ([`factorization`]), knowledge-distillation
//! losses ([`distillation`]), the training and multi-stage orchestration
//! engine ([`pipeline`]) and file formats ([`io`]).

pub mod distillation;
pub mod error;
pub mod factorization;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod pruning;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
