//! Cross-model KV-cache reuse between transformer variants that share a base
//! architecture.
//!
//! - [`model`]: toy transformer engine with full, partial and token-selective prefill
//! - [`store`]: content-addressed, layer-granular KV/E cache store
//! - [`profiler`]: contiguous recompute-group sweep and Pareto frontier
//! - [`sched`]: transfer/recompute timelines for the three loading strategies
//! - [`sim`]: multi-replica serving simulator with SLO-driven config choice

pub mod dataset;
pub mod error;
pub mod model;
pub mod profiler;
pub mod sched;
pub mod sim;
pub mod store;

pub use error::{CacheKind, Error, Result};
