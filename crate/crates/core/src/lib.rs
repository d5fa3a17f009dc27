//! Prototype-then-edit sentence generation.
//!
//! Sentences are produced by retrieving a prototype from the training corpus
//! and editing it with a neural editor conditioned on a latent edit vector.
//! The crate covers the full pipeline: corpus preparation ([`corpus`]),
//! minhash-LSH neighbor mining ([`neighbors`]), the von Mises–Fisher kernel
//! ([`vmf`]), edit-vector prior and posterior ([`editvec`]), a small
//! reverse-mode autodiff engine ([`autodiff`]), the attentional editor and
//! its language-model mode ([`editor`]), training ([`train`]) and
//! evaluation ([`eval`]).

pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod editor;
pub mod editvec;
pub mod error;
pub mod eval;
pub mod neighbors;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod vmf;

pub use error::{Error, Result};
pub use tensor::Tensor;
