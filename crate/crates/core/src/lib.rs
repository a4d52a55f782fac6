//! Feedforward sequential memory network (FSMN) language models.
//!
//! A feedforward net whose hidden layers carry learnable FIR-filter
//! memory blocks over past hidden states, trained with plain
//! backpropagation. The filter applies to a whole sentence as one banded
//! matrix product, and a mini-batch of sentences as one block-diagonal
//! product, so training costs the same as a standard feedforward LM.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod linalg;
pub mod memory;
pub mod model;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
