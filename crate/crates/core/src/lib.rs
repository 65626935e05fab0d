//! Exemplar-free class-incremental learning for RF fingerprint recognition.

pub mod adapt;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod gmm;
pub mod metrics;
pub mod numeric;
pub mod signal;

pub use error::{Error, Result};
