//! Parameter-efficient few-shot classification by entailment over a frozen
//! transformer encoder.
//!
//! Tasks are rewritten as "does the input entail this label description?"
//! and adapted by training only a handful of input pseudotoken embeddings
//! plus a two-way head. Because tasks differ only in input rows and heads,
//! requests for many tasks can share one forward pass.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod corpus;
pub mod encoder;
pub mod entailment;
mod error;
pub mod optim;
pub mod partition;
pub mod rng;
pub mod serve;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
