//! Pointer-generator sequence-to-sequence networks with span-masking
//! self-supervised pre-training (MASS variants and MAPGN).

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod masking;
pub mod rng;
pub mod vocab;
pub mod model;
pub mod training;
pub mod decoding;
pub mod metrics;
pub mod corpus;
pub mod experiment;
