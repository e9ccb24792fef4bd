use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which eviction policy drives the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[serde(rename = "morphkv")]
    MorphKv,
    Scissorhands,
    #[serde(rename = "streamingllm")]
    StreamingLlm,
    H2o,
    #[serde(rename = "snapkv")]
    SnapKv,
    FullAttention,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::MorphKv => "morphkv",
            PolicyKind::Scissorhands => "scissorhands",
            PolicyKind::StreamingLlm => "streamingllm",
            PolicyKind::H2o => "h2o",
            PolicyKind::SnapKv => "snapkv",
            PolicyKind::FullAttention => "full_attention",
        }
    }

    /// Policies that keep KV pairs for every query head rather than per
    /// shared KV head. Memory accounting multiplies their bytes by `M` instead
    /// of `M'`.
    pub fn stores_all_heads(self) -> bool {
        matches!(self, PolicyKind::SnapKv | PolicyKind::H2o)
    }
}

/// How window rows are combined into a per-entry relevance score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Sum,
    Max,
}

fn default_window() -> usize {
    1
}

/// Policy kind plus every knob any policy reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvictionPolicyConfig {
    pub kind: PolicyKind,
    /// Distant-token capacity `C` (MorphKV, H2O heavy hitters).
    #[serde(default)]
    pub capacity: usize,
    /// Recent window `R`, also the profile window length.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Fusion used at decode time.
    #[serde(default)]
    pub fusion: Fusion,
    /// Fusion used by one-shot prefill compression.
    #[serde(default)]
    pub prefill_fusion: Fusion,
    /// `None` evicts at every decode step; `Some(t)` only at steps divisible by `t`.
    #[serde(default)]
    pub eviction_interval: Option<usize>,
    /// Leading layers that never evict (MorphKV).
    #[serde(default)]
    pub protected_layers: usize,
    /// Initial tokens always retained (StreamingLLM).
    #[serde(default)]
    pub sink_count: usize,
    /// Prompt tokens kept after prefill selection (SnapKV).
    #[serde(default)]
    pub prefill_budget: usize,
    /// Compress the prompt once right after prefill.
    #[serde(default)]
    pub prefill_compress: bool,
}

impl EvictionPolicyConfig {
    fn base(kind: PolicyKind, capacity: usize, window: usize) -> Self {
        Self {
            kind,
            capacity,
            window,
            fusion: Fusion::Sum,
            prefill_fusion: Fusion::Sum,
            eviction_interval: None,
            protected_layers: 0,
            sink_count: 0,
            prefill_budget: 0,
            prefill_compress: false,
        }
    }

    pub fn morphkv(capacity: usize, window: usize) -> Self {
        Self::base(PolicyKind::MorphKv, capacity, window)
    }

    pub fn full_attention() -> Self {
        Self::base(PolicyKind::FullAttention, 0, 1)
    }

    pub fn scissorhands(window: usize) -> Self {
        Self::base(PolicyKind::Scissorhands, 0, window)
    }

    pub fn streaming_llm(sink_count: usize, window: usize) -> Self {
        Self {
            sink_count,
            ..Self::base(PolicyKind::StreamingLlm, 0, window)
        }
    }

    pub fn h2o(capacity: usize, window: usize) -> Self {
        Self::base(PolicyKind::H2o, capacity, window)
    }

    pub fn snapkv(prefill_budget: usize, window: usize) -> Self {
        Self {
            prefill_budget,
            ..Self::base(PolicyKind::SnapKv, 0, window)
        }
    }

    pub fn with_fusion(mut self, fusion: Fusion) -> Self {
        self.fusion = fusion;
        self
    }

    pub fn with_prefill_fusion(mut self, fusion: Fusion) -> Self {
        self.prefill_fusion = fusion;
        self
    }

    pub fn with_interval(mut self, interval: usize) -> Self {
        self.eviction_interval = Some(interval);
        self
    }

    pub fn with_protected_layers(mut self, layers: usize) -> Self {
        self.protected_layers = layers;
        self
    }

    pub fn with_prefill_compress(mut self, on: bool) -> Self {
        self.prefill_compress = on;
        self
    }

    /// `C + R`.
    pub fn budget(&self) -> usize {
        self.capacity + self.window
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidConfig("recent window R must be at least 1".into()));
        }
        if self.eviction_interval == Some(0) {
            return Err(Error::InvalidConfig("eviction interval T must be at least 1".into()));
        }
        if self.protected_layers > n_layers {
            return Err(Error::InvalidConfig(format!(
                "protected_layers {} exceeds n_layers {n_layers}",
                self.protected_layers
            )));
        }
        if self.kind == PolicyKind::SnapKv && self.prefill_budget < self.window {
            return Err(Error::InvalidConfig(format!(
                "snapkv prefill_budget {} is smaller than its observation window {}",
                self.prefill_budget, self.window
            )));
        }
        Ok(())
    }
}
