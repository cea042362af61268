//! Deterministic multi-rank laboratory for sequence-parallel attention.

pub mod baselines;
pub mod cli;
pub mod costmodel;
pub mod error;
pub mod kernel;
pub mod model;
pub mod oracle;
pub mod simgroup;
pub mod tensor;
pub mod ulysses;
pub mod verify;

pub use error::{Error, Result};
