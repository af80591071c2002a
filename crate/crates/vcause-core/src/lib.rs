//! Verifiable causality analysis over versioned provenance graphs.

pub mod accumulator;
pub mod causality;
pub mod cli;
pub mod dimtree;
pub mod error;
pub mod hashcore;
pub mod ingest;
pub mod protocol;
pub mod provgraph;
pub mod tamper;
pub mod wire;

pub use error::{Error, Result};
