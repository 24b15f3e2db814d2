//! Position-enhanced, time-aware graph convolution for sequential recommendation.
//!
//! Users and items live on a temporal bipartite graph. A node's embedding at a
//! query time is produced by aggregating its latest interactions (strictly
//! before that time) with a self-attention aggregator that sees time-bucket and
//! positional encodings, then stacking such convolutions to reach multi-hop
//! neighbors. Scores are inner products of user and item embeddings.
//!
//! The crate is organised bottom-up:
//!
//! - [`graph`]: interaction logs, filtering, splitting, neighborhoods, node flows
//! - [`io`]: dataset ingestion and the canonical TSV format
//! - [`tensor`]: dense tensors and a reverse-mode tape
//! - [`encoders`]: embedding tables, time buckets, sinusoidal positions
//! - [`aggregator`]: the self-attention neighborhood aggregator
//! - [`conv`]: graph convolution and multi-layer embedding of nodes
//! - [`train`]: negative sampling, loss, Adam, training loop, checkpoints
//! - [`eval`]: ranking, Recall/NDCG, cold-start cohorts, popularity baseline
//! - [`synthetic`]: generators with planted structure

// Negated float comparisons are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregator;
pub mod config;
pub mod conv;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod graph;
pub mod io;
pub mod par;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
