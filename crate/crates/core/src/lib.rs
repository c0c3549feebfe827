//! A bidirectional encoder conditioning a causal decoder through
//! cross-attention and a sigmoid-gated fusion, with the training and
//! evaluation pipeline around it.

pub mod batch;
pub mod corpus;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
