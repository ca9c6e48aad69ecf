//! Decoder-only transformer inference with pluggable attention sharing.
//!
//! Besides ordinary multi-head attention the engine supports grouped/multi
//! query attention, cross-layer KV reuse, and shared attention, in which a
//! span of consecutive layers reuses the softmax weights computed by the
//! span's first layer. The crate also carries the measurement side: attention
//! capture, layer similarity and variance surfaces, and an analytical flop /
//! KV-byte model that reconciles exactly with runtime counters.

pub mod accounting;
pub mod analysis;
pub mod attention;
pub mod error;
pub mod format;
pub mod math;
pub mod model;
pub mod report;

pub use accounting::{predict_costs, reconcile, savings_table, CostMode, CostReport, RuntimeCounters};
pub use analysis::{AttentionRecord, SimilaritySurface, VarianceSurface};
pub use attention::{ClaMap, KvCache, LayerRole, SharingPlan, Span};
pub use error::{Error, Result};
pub use math::{Matrix, RowStochasticMatrix};
pub use model::{forward_full, generate, perplexity, DecodeSession, ModelConfig, SampleMode, TokenId, Weights};
