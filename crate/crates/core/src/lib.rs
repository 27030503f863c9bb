//! Document-level relation extraction with a labelled-edge graph
//! convolutional network and multi-instance bi-affine pair scoring.

pub mod checkpoint;
pub mod classifier;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
