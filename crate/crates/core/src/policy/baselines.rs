//! Comparison policies: recent-only, sinks plus recent, cumulative heavy
//! hitters, and one-shot prompt selection.

use crate::cache::{aggregate_group_scores, select_retained, AuxScoreVector, EvictionPolicyConfig, KvCacheState};
use crate::error::{Error, Result};
use crate::model::StepOutput;
use crate::scalar::Scalar;

fn keep_last<T: Scalar>(cache: &mut KvCacheState<T>, keep_head: usize, window: usize) -> Result<Vec<Vec<usize>>> {
    (0..cache.stores().len())
        .map(|s| {
            let n = cache.stores()[s].occupancy();
            if n <= keep_head + window {
                return Ok(Vec::new());
            }
            let keep: Vec<usize> = (0..keep_head).chain(n - window..n).collect();
            cache.retain(s, &keep)
        })
        .collect()
}

/// Keeps only the `R` most recent entries of every store.
pub fn scissorhands_step<T: Scalar>(
    cache: &mut KvCacheState<T>,
    cfg: &EvictionPolicyConfig,
) -> Result<Vec<Vec<usize>>> {
    keep_last(cache, 0, cfg.window)
}

/// Keeps the first `sink_count` entries plus the `R` most recent.
pub fn streamingllm_step<T: Scalar>(
    cache: &mut KvCacheState<T>,
    cfg: &EvictionPolicyConfig,
) -> Result<Vec<Vec<usize>>> {
    keep_last(cache, cfg.sink_count, cfg.window)
}

/// Running attention mass received by each live entry, per store.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeScoreState<T> {
    prompt_len: usize,
    scores: Vec<Vec<T>>,
}

impl<T: Scalar> CumulativeScoreState<T> {
    pub fn new(n_stores: usize, prompt_len: usize) -> Self {
        Self {
            prompt_len,
            scores: vec![Vec::new(); n_stores],
        }
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn scores(&self, store: usize) -> &[T] {
        &self.scores[store]
    }
}

/// Heavy-hitter step: accumulate the new token's group-summed row, then
/// evict the lowest-scoring non-recent decode entries until decode entries
/// number `C + R`. Prompt entries are never evicted; ties evict the older entry.
pub fn h2o_step<T: Scalar>(
    cache: &mut KvCacheState<T>,
    step: &StepOutput<T>,
    state: &mut CumulativeScoreState<T>,
    cfg: &EvictionPolicyConfig,
) -> Result<Vec<Vec<usize>>> {
    if state.scores.len() != cache.stores().len() || step.attention.len() != cache.stores().len() {
        return Err(Error::InvalidShape(
            "h2o state, step output and cache disagree on store count".into(),
        ));
    }
    let mut evicted = Vec::with_capacity(cache.stores().len());
    for s in 0..cache.stores().len() {
        let store = &cache.stores()[s];
        let n = store.occupancy();
        let scores = &mut state.scores[s];
        if scores.len() > n {
            return Err(Error::InternalInvariantViolation(format!(
                "h2o scores track {} entries but store {s} holds {n}",
                scores.len()
            )));
        }
        scores.resize(n, T::zero());
        let row = aggregate_group_scores(&step.attention[s].rows)?;
        if row.len() != n {
            return Err(Error::InvalidShape(format!(
                "attention row of length {} for occupancy {n}",
                row.len()
            )));
        }
        for (acc, x) in scores.iter_mut().zip(row) {
            *acc += x;
        }

        let first_decode = store.entries().partition_point(|e| e.position < state.prompt_len);
        let decode = &store.entries()[first_decode..];
        if decode.len() <= cfg.budget() {
            evicted.push(Vec::new());
            continue;
        }
        let decode_scores = AuxScoreVector(scores[first_decode..n - cfg.window].to_vec());
        let keep_decode = select_retained(decode, &decode_scores, cfg.capacity, cfg.window)?;
        let keep: Vec<usize> = (0..first_decode)
            .chain(keep_decode.iter().map(|&i| first_decode + i))
            .collect();
        *scores = keep.iter().map(|&i| scores[i]).collect();
        evicted.push(cache.retain(s, &keep)?);
    }
    Ok(evicted)
}

/// One-shot prompt selection after prefill: score prompt entries by the
/// group-summed attention of the last `R` prompt tokens (sum fusion) and keep
/// `prefill_budget` of them, the observation window included. Decode entries
/// are never evicted afterwards.
pub fn snapkv_policy<T: Scalar>(
    cache: &mut KvCacheState<T>,
    prefill: &StepOutput<T>,
    cfg: &EvictionPolicyConfig,
) -> Result<Vec<Vec<usize>>> {
    if prefill.prefill_window.len() != cache.stores().len() {
        return Err(Error::InvalidShape("prefill rows do not cover every store".into()));
    }
    let mut evicted = Vec::with_capacity(cache.stores().len());
    for s in 0..cache.stores().len() {
        let store = &cache.stores()[s];
        let n = store.occupancy();
        if n <= cfg.prefill_budget {
            evicted.push(Vec::new());
            continue;
        }
        let window = cfg.window.min(n);
        let distant = n - window;
        let mut fused = vec![T::zero(); distant];
        let rows = &prefill.prefill_window[s];
        for wr in &rows[rows.len().saturating_sub(window)..] {
            let row = aggregate_group_scores(&wr.rows)?;
            for (f, &x) in fused.iter_mut().zip(&row) {
                *f += x;
            }
        }
        let keep = select_retained(
            store.entries(),
            &AuxScoreVector(fused),
            cfg.prefill_budget - window,
            window,
        )?;
        evicted.push(cache.retain(s, &keep)?);
    }
    Ok(evicted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::test_support::single_store;
    use crate::cache::KvEntry;
    use crate::model::{GroupAttention, WindowRow};

    fn push(cache: &mut KvCacheState<f64>, position: usize) {
        cache
            .append(
                0,
                0,
                KvEntry {
                    key: vec![0.0, 0.0],
                    value: vec![0.0, 0.0],
                    position,
                    token: 0,
                },
            )
            .unwrap();
    }

    #[test]
    fn scissorhands_keeps_recent_window() {
        let mut cache = single_store(10, 4);
        let ev = scissorhands_step(&mut cache, &EvictionPolicyConfig::scissorhands(4)).unwrap();
        assert_eq!(ev[0], vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(cache.store(0, 0).positions(), vec![6, 7, 8, 9]);

        let mut small = single_store(3, 4);
        assert!(scissorhands_step(&mut small, &EvictionPolicyConfig::scissorhands(4)).unwrap()[0].is_empty());
    }

    #[test]
    fn streamingllm_keeps_sinks_and_recent() {
        let mut cache = single_store(10, 3);
        streamingllm_step(&mut cache, &EvictionPolicyConfig::streaming_llm(2, 3)).unwrap();
        assert_eq!(cache.store(0, 0).positions(), vec![0, 1, 7, 8, 9]);

        let mut a = single_store(10, 3);
        let mut b = single_store(10, 3);
        streamingllm_step(&mut a, &EvictionPolicyConfig::streaming_llm(0, 3)).unwrap();
        scissorhands_step(&mut b, &EvictionPolicyConfig::scissorhands(3)).unwrap();
        assert_eq!(a, b);

        let mut c = single_store(4, 1);
        assert!(streamingllm_step(&mut c, &EvictionPolicyConfig::streaming_llm(5, 1)).unwrap()[0].is_empty());
    }

    #[test]
    fn h2o_evicts_oldest_on_ties_and_spares_prompt() {
        // Prompt of 2; every decode row puts all its mass on the prompt, so
        // every decode entry accumulates zero.
        let cfg = EvictionPolicyConfig::h2o(1, 1);
        let mut cache = single_store(2, 1);
        let mut state = CumulativeScoreState::new(1, 2);
        let mut log = Vec::new();
        for p in 2..7 {
            push(&mut cache, p);
            let mut row = vec![0.0; cache.store(0, 0).occupancy()];
            row[0] = 1.0;
            let step = StepOutput::scripted(p, vec![GroupAttention::from_rows(vec![row])]);
            log.push(h2o_step(&mut cache, &step, &mut state, &cfg).unwrap()[0].clone());
        }
        assert_eq!(log, vec![vec![], vec![], vec![2], vec![3], vec![4]]);
        assert_eq!(cache.store(0, 0).positions(), vec![0, 1, 5, 6]);
        assert_eq!(state.scores(0).len(), 4);
    }

    #[test]
    fn h2o_keeps_heavy_hitter() {
        let cfg = EvictionPolicyConfig::h2o(1, 1);
        let mut cache = single_store(1, 1);
        let mut state = CumulativeScoreState::new(1, 1);
        for p in 1..6 {
            push(&mut cache, p);
            let n = cache.store(0, 0).occupancy();
            let mut row = vec![0.0; n];
            // position 1 is the heavy hitter
            let idx = cache.store(0, 0).positions().iter().position(|&q| q == 1).unwrap();
            row[idx] = 0.9;
            row[n - 1] += 0.1;
            let step = StepOutput::scripted(p, vec![GroupAttention::from_rows(vec![row])]);
            h2o_step(&mut cache, &step, &mut state, &cfg).unwrap();
        }
        assert_eq!(cache.store(0, 0).positions(), vec![0, 1, 5]);
    }

    #[test]
    fn h2o_under_budget_retains_everything() {
        let cfg = EvictionPolicyConfig::h2o(8, 4);
        let mut cache = single_store(3, 4);
        let mut state = CumulativeScoreState::new(1, 3);
        for p in 3..10 {
            push(&mut cache, p);
            let n = cache.store(0, 0).occupancy();
            let step = StepOutput::scripted(p, vec![GroupAttention::from_rows(vec![vec![1.0 / n as f64; n]])]);
            assert!(h2o_step(&mut cache, &step, &mut state, &cfg).unwrap()[0].is_empty());
        }
        assert_eq!(cache.store(0, 0).occupancy(), 10);
    }

    fn snap_prefill(n: usize, window: usize, hot: usize) -> StepOutput<f64> {
        let rows = (n - window..n)
            .map(|p| {
                let mut r = vec![0.0; p + 1];
                r[hot] = 0.5;
                r[p] += 0.5;
                WindowRow {
                    producer: p,
                    rows: vec![r],
                }
            })
            .collect();
        StepOutput::scripted(n - 1, vec![GroupAttention::default()]).with_prefill_window(vec![rows])
    }

    #[test]
    fn snapkv_selects_prompt_then_keeps_decode() {
        let mut cache = single_store(50, 2);
        let cfg = EvictionPolicyConfig::snapkv(10, 2);
        snapkv_policy(&mut cache, &snap_prefill(50, 2, 5), &cfg).unwrap();
        let positions = cache.store(0, 0).positions();
        assert_eq!(positions.len(), 10);
        assert!(positions.contains(&5));
        assert_eq!(&positions[8..], &[48, 49]);
        // Ties among unattended entries go to the most recent ones.
        assert_eq!(positions, vec![5, 41, 42, 43, 44, 45, 46, 47, 48, 49]);
    }

    #[test]
    fn snapkv_short_prompt_untouched() {
        let mut cache = single_store(8, 2);
        let cfg = EvictionPolicyConfig::snapkv(10, 2);
        assert!(snapkv_policy(&mut cache, &snap_prefill(8, 2, 1), &cfg).unwrap()[0].is_empty());
        assert_eq!(cache.store(0, 0).occupancy(), 8);
    }
}
