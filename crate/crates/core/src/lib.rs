//! Attention-sink streaming for a tiny decoder-only transformer: pluggable
//! KV-cache policies, desk-scale pretraining and the evaluation harness
//! that measures streaming perplexity, retrieval and decode cost.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod evalsuite;
pub mod kvcache;
pub mod model;
pub mod numerics;
pub mod train;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
