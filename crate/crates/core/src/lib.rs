//! Structured representation learning over frozen embeddings.
//!
//! A low-rank residual adapter is trained with a multi-positive contrastive
//! loss and an ordinal mean-margin loss, mixed per sample by a softmax gate
//! and balanced across the batch by a GradNorm-style meta-optimizer. A second
//! stage fine-tunes the same adapter with a multi-label `(category, action)`
//! classifier, evaluated on seen and held-out categories.

pub mod adapter;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod metagradnorm;
pub mod objectives;
pub mod pairing;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
