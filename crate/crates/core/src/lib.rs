//! Lattice-free MMI (LF-MMI) objective and gradient for chain models.
//!
//! Graphs are stored as sparse transition lists ([`graph`]), log-likelihood
//! sequences are batched by descending length ([`batching`]), and the
//! objective is computed with a probability-space forward-backward pass
//! ([`forward_backward`], [`loss`]). [`toy_builder`] makes small numerator and
//! denominator graphs from phone transcripts and [`oracle`] provides
//! brute-force references for testing.

pub mod array_io;
pub mod batching;
pub mod cli;
pub mod demo;
pub mod error;
pub mod forward_backward;
pub mod fst_io;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod oracle;
pub mod synth;
pub mod toy_builder;

pub use batching::LogLikBatch;
pub use error::{Error, Result};
pub use forward_backward::{forward_backward, FbOptions, FbResult, ItemStatus, LeakDistribution};
pub use graph::{ChainGraph, ChainGraphBatch, Transition};
pub use loss::{chain_loss, ChainLossResult};
