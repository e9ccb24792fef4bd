//! Per-step run records.
//!
//! Step 0 is prefill (the final prompt position attending over the prompt);
//! step `i ≥ 1` is the `i`-th decoded token at position `prompt_len + i - 1`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::cache::{CacheSnapshot, EvictionPolicyConfig};
use crate::error::{Error, Result};
use crate::metrics::MemoryModel;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Token processed at this step (the last prompt token for step 0).
    pub token: u32,
    pub position: usize,
    /// Per store, after eviction.
    pub occupancy: Vec<usize>,
    /// Per store, positions evicted at this step.
    pub evicted: Vec<Vec<usize>>,
    pub bytes: u64,
}

/// Dense per-step data kept in memory for oracle work; never serialized.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Capture {
    /// `[step]` logits.
    pub logits: Vec<Vec<f64>>,
    /// `[step][store][group head]` rotated queries.
    pub queries: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[step][store][group head]` attention outputs before the output projection.
    pub outputs: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[store][position]` rotated keys.
    pub keys: Vec<Vec<Vec<f64>>>,
    /// `[store][position]` values.
    pub values: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub model: ModelConfig,
    pub policy: EvictionPolicyConfig,
    pub memory: MemoryModel,
    pub prompt: Vec<u32>,
    pub steps: Vec<StepRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub snapshots: Vec<CacheSnapshot>,
    #[serde(skip)]
    pub capture: Option<Capture>,
}

impl StepTrace {
    pub fn n_stores(&self) -> usize {
        self.model.n_layers * self.model.n_kv_heads
    }

    /// Decoded tokens, in order.
    pub fn generated(&self) -> Vec<u32> {
        self.steps.iter().skip(1).map(|s| s.token).collect()
    }

    pub fn occupancy_trace(&self) -> Vec<Vec<usize>> {
        self.steps.iter().map(|s| s.occupancy.clone()).collect()
    }

    pub fn bytes(&self) -> Vec<u64> {
        self.steps.iter().map(|s| s.bytes).collect()
    }

    /// Bytes an unevicted grouped cache would hold at every step.
    pub fn full_attention_bytes(&self) -> Vec<u64> {
        let m = &self.model;
        self.steps
            .iter()
            .map(|s| {
                crate::metrics::closed_form_bytes(
                    (s.position + 1) as u64,
                    m.n_kv_heads as u64,
                    m.n_layers as u64,
                    m.head_dim as u64,
                    self.memory.bytes_per_scalar as u64,
                )
            })
            .collect()
    }

    /// Positions each store attended over at every step, rebuilt from the
    /// eviction log. Fails if the log is not self-consistent.
    pub fn attended_positions(&self) -> Result<Vec<Vec<Vec<usize>>>> {
        let n_stores = self.n_stores();
        let violation = |step: usize, detail: String| Error::InvariantViolation { step, detail };
        let mut live: Vec<BTreeSet<usize>> = vec![(0..self.prompt.len()).collect(); n_stores];
        let mut attended = Vec::with_capacity(self.steps.len());
        for (i, rec) in self.steps.iter().enumerate() {
            if rec.step != i {
                return Err(violation(i, format!("step index {} out of sequence", rec.step)));
            }
            let expected = (self.prompt.len() + i).saturating_sub(1);
            if rec.position != expected {
                return Err(violation(
                    i,
                    format!("position {} where {expected} was expected", rec.position),
                ));
            }
            if rec.evicted.len() != n_stores || rec.occupancy.len() != n_stores {
                return Err(violation(
                    i,
                    format!("record covers {} stores, model has {n_stores}", rec.evicted.len()),
                ));
            }
            if i > 0 {
                for set in live.iter_mut() {
                    set.insert(rec.position);
                }
            }
            attended.push(live.iter().map(|s| s.iter().copied().collect()).collect());
            for (s, (set, gone)) in live.iter_mut().zip(&rec.evicted).enumerate() {
                for p in gone {
                    if !set.remove(p) {
                        return Err(violation(
                            i,
                            format!("store {s} evicted position {p} which was not live"),
                        ));
                    }
                }
                if set.len() != rec.occupancy[s] {
                    return Err(violation(
                        i,
                        format!(
                            "store {s} reports occupancy {} but holds {}",
                            rec.occupancy[s],
                            set.len()
                        ),
                    ));
                }
            }
        }
        Ok(attended)
    }

    /// Structural checks: contiguous steps, consistent eviction log.
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::EmptyTrace);
        }
        self.attended_positions().map(|_| ())
    }
}
