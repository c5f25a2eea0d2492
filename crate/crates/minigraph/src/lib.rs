//! Desk-scale distributed minibatch GNN training engine: partitioned graphs,
//! thread-parallel layered neighbor sampling, a per-layer historical
//! embedding cache filled by asynchronous embedding pushes, and GraphSAGE /
//! GAT models with hand-written backward passes.

pub mod comm;
pub mod error;
pub mod graph;
pub mod partition;
pub mod hec;
pub mod rng;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
