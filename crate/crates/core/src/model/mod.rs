//! Tiny pre-norm decoder-only transformer whose attention reads keys and
//! values from an externally owned [`KvCache`](crate::kvcache::KvCache).

mod alibi;
mod attention;
mod config;
mod decode;
mod graph;
mod rope;
mod weights;

pub use alibi::{alibi_bias, alibi_slope};
pub use attention::attention_head_forward;
pub use config::{prepend_sink_tokens, AttnVariant, ModelConfig, PosKind, RESERVED_SINK_SLOTS};
pub use decode::Model;
pub use graph::{forward_sequence, Batch, Tape, TrainGraph};
pub use rope::{apply_rope, RopeTable};
pub use weights::{LayerWeights, Weights};
