pub mod ad;
pub mod cli;
pub mod error;
pub mod explain;
pub mod graph;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod quadrature;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
