//! Dynamic token selection: keep the last `R` entries plus the `C` distant
//! entries the recent window attended to most.

use std::cmp::Ordering;

use super::config::{EvictionPolicyConfig, PolicyKind};
use super::profile::{fuse, AuxScoreVector};
use super::{KvCacheState, KvEntry};
use crate::error::{Error, Result};
use crate::model::StepOutput;
use crate::scalar::Scalar;

/// How a KV head's group of query-head rows becomes one profile row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreRouting {
    /// Elementwise sum over the `M/M'` query heads sharing the KV head.
    #[default]
    Aggregate,
    /// Use the single query head's row as-is. Only valid when `M' = M`.
    Direct,
}

/// Elementwise sum of the attention rows of one KV-head group.
pub fn aggregate_group_scores<T: Scalar>(rows: &[Vec<T>]) -> Result<Vec<T>> {
    let (first, rest) = rows
        .split_first()
        .ok_or_else(|| Error::InvalidShape("empty query-head group".into()))?;
    let mut out = first.clone();
    for row in rest {
        if row.len() != out.len() {
            return Err(Error::InvalidShape(format!(
                "group rows of lengths {} and {}",
                out.len(),
                row.len()
            )));
        }
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    Ok(out)
}

fn route<T: Scalar>(rows: &[Vec<T>], routing: ScoreRouting) -> Result<Vec<T>> {
    match routing {
        ScoreRouting::Aggregate => aggregate_group_scores(rows),
        ScoreRouting::Direct => match rows {
            [row] => Ok(row.clone()),
            _ => Err(Error::InvalidConfig(format!(
                "direct score routing needs one query head per KV head, got {}",
                rows.len()
            ))),
        },
    }
}

/// Indices (ascending) of the entries kept: the last `min(window, n)` plus the
/// top-`capacity` distant entries by `scores`. Ties go to the more recent entry.
pub fn select_retained<T: Scalar>(
    entries: &[KvEntry<T>],
    scores: &AuxScoreVector<T>,
    capacity: usize,
    window: usize,
) -> Result<Vec<usize>> {
    let n = entries.len();
    let distant = n - window.min(n);
    if scores.len() != distant {
        return Err(Error::InvalidShape(format!(
            "{} scores for {distant} distant entries",
            scores.len()
        )));
    }
    let mut ranked: Vec<usize> = (0..distant).collect();
    ranked.sort_by(|&a, &b| {
        scores.0[b]
            .partial_cmp(&scores.0[a])
            .unwrap_or(Ordering::Equal)
            .then(entries[b].position.cmp(&entries[a].position))
    });
    ranked.truncate(capacity.min(distant));
    ranked.sort_unstable();
    ranked.extend(distant..n);
    Ok(ranked)
}

fn check_policy<T: Scalar>(cache: &KvCacheState<T>, cfg: &EvictionPolicyConfig) -> Result<()> {
    if cfg.kind != PolicyKind::MorphKv {
        return Err(Error::InvalidConfig(format!(
            "expected morphkv policy, got {}",
            cfg.kind.name()
        )));
    }
    if cache.window() != cfg.window {
        return Err(Error::InvalidConfig(format!(
            "cache profile window {} differs from policy window {}",
            cache.window(),
            cfg.window
        )));
    }
    Ok(())
}

/// One decode step of MorphKV with group aggregation. See [`morphkv_step_with`].
pub fn morphkv_step<T: Scalar>(
    cache: &mut KvCacheState<T>,
    step: &StepOutput<T>,
    cfg: &EvictionPolicyConfig,
    step_index: usize,
) -> Result<Vec<Vec<usize>>> {
    morphkv_step_with(cache, step, cfg, step_index, ScoreRouting::Aggregate)
}

/// Records the new token's profile row in every store, then evicts down to
/// `C + R` where the layer is unprotected, the step is on the eviction
/// schedule and the store is over budget.
///
/// Returns the evicted positions per store.
pub fn morphkv_step_with<T: Scalar>(
    cache: &mut KvCacheState<T>,
    step: &StepOutput<T>,
    cfg: &EvictionPolicyConfig,
    step_index: usize,
    routing: ScoreRouting,
) -> Result<Vec<Vec<usize>>> {
    check_policy(cache, cfg)?;
    if step.attention.len() != cache.stores().len() {
        return Err(Error::InvalidShape(format!(
            "step output covers {} stores, cache has {}",
            step.attention.len(),
            cache.stores().len()
        )));
    }
    let on_schedule = cfg.eviction_interval.is_none_or(|t| step_index.is_multiple_of(t));
    let budget = cfg.budget();
    let mut evicted = Vec::with_capacity(cache.stores().len());
    for s in 0..cache.stores().len() {
        let (layer, _) = cache.store_coords(s);
        let row = route(&step.attention[s].rows, routing)?;
        cache.stores_mut()[s].record_profile(row, step.position)?;

        let store = &cache.stores()[s];
        if layer < cfg.protected_layers || !on_schedule || store.occupancy() <= budget {
            evicted.push(Vec::new());
            continue;
        }
        let scores = fuse(store.profile(), cfg.fusion)?;
        let keep = select_retained(store.entries(), &scores, cfg.capacity, cfg.window)?;
        evicted.push(cache.retain(s, &keep)?);
        if cache.stores()[s].occupancy() != budget {
            return Err(Error::InternalInvariantViolation(format!(
                "store {s} holds {} entries after eviction, expected {budget}",
                cache.stores()[s].occupancy()
            )));
        }
    }
    Ok(evicted)
}

/// Seeds every store's profile window with the final prompt rows returned by
/// prefill (at most `R` of them).
pub fn record_prefill_profiles<T: Scalar>(
    cache: &mut KvCacheState<T>,
    step: &StepOutput<T>,
    routing: ScoreRouting,
) -> Result<()> {
    if step.prefill_window.len() != cache.stores().len() {
        return Err(Error::InvalidShape(format!(
            "prefill rows cover {} stores, cache has {}",
            step.prefill_window.len(),
            cache.stores().len()
        )));
    }
    for (s, window_rows) in step.prefill_window.iter().enumerate() {
        let store = &mut cache.stores_mut()[s];
        let occupancy = store.occupancy();
        for wr in window_rows {
            let mut row = route(&wr.rows, routing)?;
            if row.len() > occupancy {
                return Err(Error::InvalidShape(format!(
                    "prefill row of length {} for occupancy {occupancy}",
                    row.len()
                )));
            }
            row.resize(occupancy, T::zero());
            store.record_profile(row, wr.producer)?;
        }
    }
    Ok(())
}

/// One-shot selection over the prompt using the recorded prefill profiles and
/// `prefill_fusion`. Protected layers are left intact.
pub fn prefill_compress<T: Scalar>(cache: &mut KvCacheState<T>, cfg: &EvictionPolicyConfig) -> Result<Vec<Vec<usize>>> {
    check_policy(cache, cfg)?;
    let mut evicted = Vec::with_capacity(cache.stores().len());
    for s in 0..cache.stores().len() {
        let (layer, _) = cache.store_coords(s);
        let store = &cache.stores()[s];
        if layer < cfg.protected_layers || store.occupancy() <= cfg.budget() {
            evicted.push(Vec::new());
            continue;
        }
        let scores = fuse(store.profile(), cfg.prefill_fusion)?;
        let keep = select_retained(store.entries(), &scores, cfg.capacity, cfg.window)?;
        evicted.push(cache.retain(s, &keep)?);
    }
    Ok(evicted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::test_support::single_store;
    use crate::cache::Fusion;
    use crate::model::GroupAttention;

    fn step(position: usize, row: Vec<f64>) -> StepOutput<f64> {
        StepOutput::scripted(position, vec![GroupAttention::from_rows(vec![row])])
    }

    #[test]
    fn aggregate_examples() {
        let out: Vec<f64> = aggregate_group_scores(&[vec![0.2, 0.8], vec![0.4, 0.6]]).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15 && (out[1] - 1.4).abs() < 1e-15);
        assert_eq!(aggregate_group_scores(&[vec![0.1, 0.9]]).unwrap(), vec![0.1, 0.9]);
        let n = 5;
        let rows = vec![vec![1.0 / n as f64; n]; 4];
        for x in aggregate_group_scores(&rows).unwrap() {
            assert!((x - 4.0 / n as f64).abs() < 1e-15);
        }
        assert!(matches!(
            aggregate_group_scores(&[vec![0.5, 0.5], vec![1.0]]),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn direct_routing_requires_single_row() {
        assert!(route(&[vec![1.0f64], vec![0.0]], ScoreRouting::Direct).is_err());
        assert_eq!(
            route(&[vec![0.25f64, 0.75]], ScoreRouting::Direct).unwrap(),
            vec![0.25, 0.75]
        );
    }

    #[test]
    fn select_walkthrough() {
        // me, today's, weather, The
        let cache = single_store(4, 2);
        let keep = select_retained(cache.store(0, 0).entries(), &AuxScoreVector(vec![0.1, 0.6]), 1, 2).unwrap();
        assert_eq!(keep, vec![1, 2, 3]);
    }

    #[test]
    fn select_under_capacity_keeps_everything() {
        let cache = single_store(5, 2);
        let keep = select_retained(cache.store(0, 0).entries(), &AuxScoreVector(vec![0.3, 0.1, 0.2]), 3, 2).unwrap();
        assert_eq!(keep, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn select_ties_prefer_recent() {
        // Enumerating the rule on a 4-entry distant prefix with equal scores:
        // rank order is 3, 2, 1, 0, so C=2 keeps the two most recent.
        let cache = single_store(6, 2);
        let keep = select_retained(cache.store(0, 0).entries(), &AuxScoreVector(vec![0.25; 4]), 2, 2).unwrap();
        assert_eq!(keep, vec![2, 3, 4, 5]);
    }

    #[test]
    fn select_rejects_misaligned_scores() {
        let cache = single_store(4, 2);
        assert!(select_retained(cache.store(0, 0).entries(), &AuxScoreVector(vec![0.1]), 1, 2).is_err());
    }

    #[test]
    fn step_evicts_lowest_fused_entry() {
        let mut cache = single_store(4, 2);
        let cfg = EvictionPolicyConfig::morphkv(1, 2);
        cache.stores_mut()[0]
            .record_profile(vec![0.1, 0.3, 0.6, 0.0], 3)
            .unwrap();
        cache
            .append(
                0,
                0,
                KvEntry {
                    key: vec![0.0, 0.0],
                    value: vec![0.0, 0.0],
                    position: 4,
                    token: 4,
                },
            )
            .unwrap();
        let ev = morphkv_step(&mut cache, &step(4, vec![0.05, 0.5, 0.15, 0.2, 0.1]), &cfg, 1).unwrap();
        // distant = 0,1,2; sums 0.15, 0.8, 0.75 → keep 1
        assert_eq!(ev, vec![vec![0, 2]]);
        assert_eq!(cache.store(0, 0).positions(), vec![1, 3, 4]);
        assert!(cache.check_alignment().is_ok());
    }

    #[test]
    fn protected_layers_and_schedule_skip_eviction() {
        let mut cache = single_store(5, 1);
        let row = vec![0.2; 5];
        let cfg = EvictionPolicyConfig::morphkv(1, 1).with_protected_layers(1);
        let ev = morphkv_step(&mut cache, &step(4, row.clone()), &cfg, 1).unwrap();
        assert!(ev[0].is_empty());

        let mut cache = single_store(5, 1);
        let cfg = EvictionPolicyConfig::morphkv(1, 1).with_interval(8);
        let ev = morphkv_step(&mut cache, &step(4, row.clone()), &cfg, 7).unwrap();
        assert!(ev[0].is_empty());
        let mut cache2 = single_store(5, 1);
        let ev = morphkv_step(&mut cache2, &step(4, row), &cfg, 8).unwrap();
        assert_eq!(ev[0].len(), 3);
    }

    #[test]
    fn prefill_compress_uses_prefill_fusion() {
        let mut cache = single_store(6, 2);
        let store = &mut cache.stores_mut()[0];
        store.record_profile(vec![0.5, 0.0, 0.1, 0.1, 0.3, 0.0], 4).unwrap();
        store.record_profile(vec![0.0, 0.35, 0.3, 0.05, 0.1, 0.2], 5).unwrap();
        // sum: 0.5, 0.35, 0.4, 0.15 → keep 0; max: 0.5, 0.35, 0.3, 0.1 → keep 0 too. C=2:
        let sum_cfg = EvictionPolicyConfig::morphkv(2, 2);
        let mut a = cache.clone();
        prefill_compress(&mut a, &sum_cfg).unwrap();
        assert_eq!(a.store(0, 0).positions(), vec![0, 2, 4, 5]);
        let max_cfg = sum_cfg.with_prefill_fusion(Fusion::Max);
        let mut b = cache.clone();
        prefill_compress(&mut b, &max_cfg).unwrap();
        assert_eq!(b.store(0, 0).positions(), vec![0, 1, 4, 5]);
    }

    #[test]
    fn rejects_foreign_policy_and_window_mismatch() {
        let mut cache = single_store(3, 2);
        let s = step(2, vec![0.2, 0.3, 0.5]);
        assert!(morphkv_step(&mut cache, &s, &EvictionPolicyConfig::scissorhands(2), 1).is_err());
        assert!(morphkv_step(&mut cache, &s, &EvictionPolicyConfig::morphkv(1, 3), 1).is_err());
    }
}
