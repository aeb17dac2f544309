//! RGB-D indoor place recognition: overlap-labelled dataset generation,
//! context-cluster global retrieval, self/cross-source context-cluster
//! reranking, training losses and a Recall@k evaluation harness.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod kernels;
pub mod learning;
pub mod synthetic;

pub use error::{Error, Result};
