//! KV memory accounting and the n-gram repetition metric.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::cache::{EvictionPolicyConfig, PolicyKind};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// How cache occupancy is turned into bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub bytes_per_scalar: usize,
    /// Also count the profile window (`R × occupancy` scalars per store) for MorphKV.
    pub include_profile: bool,
}

impl MemoryModel {
    pub fn new(bytes_per_scalar: usize) -> Self {
        Self {
            bytes_per_scalar,
            include_profile: false,
        }
    }

    pub fn with_profile(mut self, on: bool) -> Self {
        self.include_profile = on;
        self
    }
}

impl Default for MemoryModel {
    fn default() -> Self {
        Self::new(8)
    }
}

/// `entries × heads × layers × d_h × 2 × bytes_per_scalar`.
pub fn closed_form_bytes(entries: u64, heads: u64, layers: u64, head_dim: u64, bytes_per_scalar: u64) -> u64 {
    entries * heads * layers * head_dim * 2 * bytes_per_scalar
}

/// Heads whose KV pairs a policy stores: `M` for all-heads policies, `M'` otherwise.
pub fn stored_heads(kind: PolicyKind, model: &ModelConfig) -> usize {
    if kind.stores_all_heads() {
        model.n_query_heads
    } else {
        model.n_kv_heads
    }
}

/// Bytes per step from per-store occupancies (`layer * n_kv_heads + kv_head`).
pub fn kv_bytes(
    policy: &EvictionPolicyConfig,
    occupancy_trace: &[Vec<usize>],
    model: &ModelConfig,
    memory: &MemoryModel,
) -> Vec<u64> {
    let per_store_heads = (stored_heads(policy.kind, model) / model.n_kv_heads) as u64;
    let profile = memory.include_profile && policy.kind == PolicyKind::MorphKv;
    occupancy_trace
        .iter()
        .map(|stores| {
            stores
                .iter()
                .map(|&occ| {
                    let kv = closed_form_bytes(
                        occ as u64,
                        per_store_heads,
                        1,
                        model.head_dim as u64,
                        memory.bytes_per_scalar as u64,
                    );
                    let extra = if profile {
                        (policy.window * occ * memory.bytes_per_scalar) as u64
                    } else {
                        0
                    };
                    kv + extra
                })
                .sum()
        })
        .collect()
}

/// Elementwise `policy / full`.
pub fn relative_cache_ratio(policy_bytes: &[u64], full_bytes: &[u64]) -> Result<Vec<f64>> {
    if policy_bytes.len() != full_bytes.len() {
        return Err(Error::TraceMismatch(format!(
            "{} policy steps vs {} reference steps",
            policy_bytes.len(),
            full_bytes.len()
        )));
    }
    if full_bytes.is_empty() || full_bytes.contains(&0) {
        return Err(Error::EmptyTrace);
    }
    Ok(policy_bytes
        .iter()
        .zip(full_bytes)
        .map(|(&p, &f)| p as f64 / f as f64)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionReport {
    pub n: usize,
    pub total_grams: usize,
    pub distinct_grams: usize,
    /// `1 - distinct / total`, or 0 when there are no grams.
    pub repetition_rate: f64,
}

/// Fraction of repeated sliding-window n-grams.
pub fn repetition_rate(tokens: &[u32], n: usize) -> Result<RepetitionReport> {
    if n < 1 {
        return Err(Error::InvalidParam("n-gram length must be at least 1".into()));
    }
    let grams: Vec<&[u32]> = tokens.windows(n).collect();
    let total = grams.len();
    let distinct = grams.into_iter().collect::<HashSet<_>>().len();
    let rate = if total == 0 {
        0.0
    } else {
        1.0 - distinct as f64 / total as f64
    };
    Ok(RepetitionReport {
        n,
        total_grams: total,
        distinct_grams: distinct,
        repetition_rate: rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_head() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_query_heads: 1,
            n_kv_heads: 1,
            head_dim: 16,
            vocab_size: 8,
            seed: 0,
        }
    }

    #[test]
    fn single_entry_bytes() {
        let bytes = kv_bytes(
            &EvictionPolicyConfig::full_attention(),
            &[vec![1]],
            &one_head(),
            &MemoryModel::new(8),
        );
        assert_eq!(bytes, vec![256]);
    }

    #[test]
    fn large_model_closed_form_matches_per_token_sum() {
        // 80 layers, 8 KV heads, d_h 128, 2-byte scalars, batch 256, 32K tokens.
        let closed = closed_form_bytes(32_768, 8, 80, 128, 2) * 256;
        let mut per_token = 0u64;
        for _layer in 0..80 {
            for _head in 0..8 {
                per_token += 128 * 2 * 2;
            }
        }
        assert_eq!(per_token, 327_680);
        assert_eq!(closed, per_token * 32_768 * 256);
        assert_eq!(closed, 2_748_779_069_440);
    }

    #[test]
    fn all_heads_policies_pay_group_factor() {
        let model = ModelConfig::default();
        let occ = vec![vec![64; model.n_layers * model.n_kv_heads]];
        let mem = MemoryModel::new(2);
        let grouped = kv_bytes(&EvictionPolicyConfig::morphkv(48, 16), &occ, &model, &mem);
        let all = kv_bytes(&EvictionPolicyConfig::snapkv(64, 16), &occ, &model, &mem);
        assert_eq!(grouped[0] * 4, all[0]);
        assert_eq!(grouped[0], closed_form_bytes(64, 2, 4, 16, 2));
    }

    #[test]
    fn profile_overhead_is_opt_in() {
        let model = one_head();
        let cfg = EvictionPolicyConfig::morphkv(2, 3);
        let base = kv_bytes(&cfg, &[vec![5]], &model, &MemoryModel::new(8));
        let with = kv_bytes(&cfg, &[vec![5]], &model, &MemoryModel::new(8).with_profile(true));
        assert_eq!(with[0] - base[0], 3 * 5 * 8);
    }

    #[test]
    fn ratio_behaviour() {
        assert_eq!(relative_cache_ratio(&[10, 20], &[10, 20]).unwrap(), vec![1.0, 1.0]);
        assert!(matches!(relative_cache_ratio(&[], &[]), Err(Error::EmptyTrace)));
        assert!(matches!(relative_cache_ratio(&[1], &[0]), Err(Error::EmptyTrace)));
        assert!(matches!(
            relative_cache_ratio(&[1], &[1, 2]),
            Err(Error::TraceMismatch(_))
        ));
    }

    #[test]
    fn repetition_hand_counts() {
        let r = repetition_rate(&[0, 1, 0, 1, 0, 1], 2).unwrap();
        assert_eq!((r.total_grams, r.distinct_grams), (5, 2));
        assert!((r.repetition_rate - 0.6).abs() < 1e-15);
        assert_eq!(repetition_rate(&[1, 2, 3, 4, 5], 2).unwrap().repetition_rate, 0.0);
        let short = repetition_rate(&[1, 2], 3).unwrap();
        assert_eq!((short.total_grams, short.repetition_rate), (0, 0.0));
        assert!(matches!(repetition_rate(&[1], 0), Err(Error::InvalidParam(_))));
    }
}
