//! Knowledge distillation workbench for BERT-style encoders.

// Validation deliberately writes `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod cli;
pub mod corpus;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod loyalty;
pub mod numerics;
pub mod taskmetrics;
pub mod tokenizer;

pub use error::{Error, Result};
