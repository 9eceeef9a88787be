//! Deterministic toy decoder-only transformer with grouped-query attention.
//!
//! A sender and a receiver share the base weights; the receiver adds seeded
//! noise on chosen layers. The engine exposes full prefill, partial prefill
//! over a mix of sender and receiver caches, greedy decode, and the
//! agreement score used as the quality proxy.

mod cache;
mod config;
mod engine;
mod quality;
mod recompute;
mod weights;

pub use cache::{ECache, KvCache, LayerKvCache};
pub use config::{ModelConfig, PerturbationSpec, TokenSequence};
pub use engine::{
    argmax, decode_greedy, full_prefill, partial_prefill, CacheSource, MixedPrefill, PrefillOutput, SenderCaches,
};
pub use quality::{
    agreement_score, decode_mixed, reference_decode, reuse_layers_prefill, select_positions, token_selective_prefill,
    Agreement, SelectivePrefill, DEFAULT_HORIZON,
};
pub use recompute::{LayerGroup, RecomputeConfig};
pub use weights::{build_model, LayerWeights, Matrix, ModelWeights};
