//! Masked generative modeling over discrete token grids.

pub mod corpus;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod sampler;
pub mod tokenizer;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
