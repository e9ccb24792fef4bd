//! Desk-scale decoder runtime with bounded KV caches.
//!
//! The core is generic over the scalar type; the aliases below fix it to
//! `f64` (the default everywhere) or `f32`.

pub mod cache;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod policy;
pub mod scalar;
pub mod tensor;
pub mod trace;

pub use cache::{
    AttentionProfileWindow, AuxScoreVector, CacheSnapshot, EvictionPolicyConfig, Fusion, HeadStore, KvCacheState,
    KvEntry, PolicyKind, ScoreRouting,
};
pub use error::{Error, Result};
pub use harness::{compare, oracle_regression, run, RunConfig};
pub use metrics::{kv_bytes, relative_cache_ratio, repetition_rate, MemoryModel, RepetitionReport};
pub use model::{decode_step, init_model, prefill, AttentionPath, DecoderWeights, ModelConfig, StepOutput};
pub use oracle::{optimal_subset, shadow_error, ErrorRecord};
pub use policy::{EvictionLog, PolicyEngine};
pub use scalar::Scalar;
pub use trace::{StepRecord, StepTrace};

pub type KvCache = KvCacheState<f64>;
pub type Model = DecoderWeights<f64>;
pub type Engine = PolicyEngine<f64>;
pub type KvCache32 = KvCacheState<f32>;
pub type Model32 = DecoderWeights<f32>;
pub type Engine32 = PolicyEngine<f32>;
