//! Curriculum-driven masked language model pretraining at desk scale.
//!
//! The crate is organised along the pipeline:
//! [`corpus`] cleaning and packing, [`tokenizer`] BPE, [`wordclass`]
//! unsupervised word-class induction, [`model`] a pre-layer-norm transformer
//! encoder with task heads and AdamW, [`curriculum`] the vocabulary, data and
//! objective curricula, [`eval`] minimal-pair evaluation, and [`pipeline`]
//! which wires everything behind one JSON run configuration.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod corpus;
pub mod curriculum;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod tokenizer;
pub mod wordclass;

pub use error::{Error, Result};
