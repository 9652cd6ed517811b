//! Grouped structural pruning of small vision transformers, with a
//! domain-generalisation training harness and attention-distance analysis.

pub mod attention;
pub mod data;
pub mod depgraph;
pub mod error;
pub mod experiment;
pub mod importance;
pub mod metrics;
pub mod model;
pub mod pruner;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
