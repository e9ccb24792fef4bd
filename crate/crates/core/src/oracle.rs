//! Ground truth for cache reduction: per-step output error against a
//! full-attention shadow run, and exhaustive search for the best reduced
//! cache on tiny instances.

use serde::{Deserialize, Serialize};

use crate::cache::KvEntry;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::trace::StepTrace;

/// Largest cache the exhaustive search accepts.
pub const MAX_ORACLE_ENTRIES: usize = 22;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub step: usize,
    pub layer: usize,
    pub kv_head: usize,
    pub l2_error: f64,
}

/// Scores index subsets of one store against the output over every entry.
///
/// For a group of query heads the error is `sqrt(Σ_h ‖O_h − O'_h‖²)`, which
/// reduces to `‖O − O'‖` for a single head.
#[derive(Debug, Clone)]
pub struct SubsetScorer<'a> {
    logits: Vec<Vec<f64>>,
    values: &'a [Vec<f64>],
    reference: Vec<Vec<f64>>,
}

impl<'a> SubsetScorer<'a> {
    pub fn new(queries: &[Vec<f64>], keys: &[Vec<f64>], values: &'a [Vec<f64>]) -> Result<Self> {
        if keys.is_empty() {
            return Err(Error::EmptyCache);
        }
        if keys.len() != values.len() || queries.is_empty() {
            return Err(Error::InvalidShape(format!(
                "{} queries over {} keys and {} values",
                queries.len(),
                keys.len(),
                values.len()
            )));
        }
        let d = queries[0].len();
        if queries.iter().chain(keys).any(|v| v.len() != d) {
            return Err(Error::InvalidShape("query and key widths differ".into()));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let logits = queries
            .iter()
            .map(|q| {
                keys.iter()
                    .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect()
            })
            .collect();
        let mut scorer = Self {
            logits,
            values,
            reference: Vec::new(),
        };
        let all: Vec<usize> = (0..keys.len()).collect();
        scorer.reference = scorer.outputs(&all);
        Ok(scorer)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn outputs(&self, keep: &[usize]) -> Vec<Vec<f64>> {
        let width = self.values[0].len();
        self.logits
            .iter()
            .map(|row| {
                let m = keep.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
                let mut out = vec![0.0; width];
                let mut total = 0.0;
                for &j in keep {
                    let w = (row[j] - m).exp();
                    total += w;
                    for (o, v) in out.iter_mut().zip(&self.values[j]) {
                        *o += w * v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= total);
                out
            })
            .collect()
    }

    /// Error of attending only to `keep` (ascending indices).
    pub fn error(&self, keep: &[usize]) -> f64 {
        if keep.is_empty() {
            return self.reference.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        }
        self.outputs(keep)
            .iter()
            .zip(&self.reference)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>()
            .sqrt()
    }

    /// Best subset of size `budget` containing the last `forced_recent`
    /// indices, by exhaustive enumeration. Ties keep the first subset found.
    pub fn optimal(&self, budget: usize, forced_recent: usize) -> Result<(Vec<usize>, f64)> {
        let n = self.len();
        if n > MAX_ORACLE_ENTRIES {
            return Err(Error::InstanceTooLarge {
                size: n,
                max: MAX_ORACLE_ENTRIES,
            });
        }
        if budget > n || forced_recent > budget {
            return Err(Error::InvalidParam(format!(
                "budget {budget} with {forced_recent} forced entries over a cache of {n}"
            )));
        }
        let distant = n - forced_recent;
        let pick = budget - forced_recent;
        let recent: Vec<usize> = (distant..n).collect();
        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut keep = Vec::with_capacity(budget);
        let mut mask: u32 = if pick == 0 { 0 } else { (1u32 << pick) - 1 };
        let limit = 1u32 << distant;
        loop {
            keep.clear();
            keep.extend((0..distant).filter(|&j| mask >> j & 1 == 1));
            keep.extend_from_slice(&recent);
            let err = self.error(&keep);
            if best.as_ref().is_none_or(|(_, e)| err < *e) {
                best = Some((keep.clone(), err));
            }
            if mask == 0 {
                break;
            }
            let low = mask & mask.wrapping_neg();
            let ripple = mask + low;
            mask = (((ripple ^ mask) >> 2) / low) | ripple;
            if mask >= limit {
                break;
            }
        }
        Ok(best.expect("at least one subset is enumerated"))
    }
}

fn entry_columns<T: Scalar>(entries: &[KvEntry<T>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let conv = |v: &[T]| v.iter().map(|x| x.to_f64_lossy()).collect::<Vec<f64>>();
    entries.iter().map(|e| (conv(&e.key), conv(&e.value))).unzip()
}

/// Best reduced cache for one query, the last `recent` entries forced in.
pub fn optimal_subset<T: Scalar>(
    query: &[T],
    entries: &[KvEntry<T>],
    budget: usize,
    recent: usize,
) -> Result<(Vec<usize>, f64)> {
    let q = vec![query.iter().map(|x| x.to_f64_lossy()).collect()];
    optimal_group_subset(&q, entries, budget, recent)
}

/// [`optimal_subset`] without the recent-window constraint.
pub fn unconstrained_optimal_subset<T: Scalar>(
    query: &[T],
    entries: &[KvEntry<T>],
    budget: usize,
) -> Result<(Vec<usize>, f64)> {
    optimal_subset(query, entries, budget, 0)
}

/// [`optimal_subset`] for the query heads sharing one KV head.
pub fn optimal_group_subset<T: Scalar>(
    queries: &[Vec<f64>],
    entries: &[KvEntry<T>],
    budget: usize,
    recent: usize,
) -> Result<(Vec<usize>, f64)> {
    if entries.len() > MAX_ORACLE_ENTRIES {
        return Err(Error::InstanceTooLarge {
            size: entries.len(),
            max: MAX_ORACLE_ENTRIES,
        });
    }
    let (keys, values) = entry_columns(entries);
    SubsetScorer::new(queries, &keys, &values)?.optimal(budget, recent)
}

fn mismatch(detail: impl Into<String>) -> Error {
    Error::TraceMismatch(detail.into())
}

/// Per-(step, layer, kv_head) output error of `policy_run` against the
/// full-attention `full_run`.
///
/// Both runs must share model, prompt and token sequence. The error at a step
/// is computed from the full run's queries, keys and values, restricted to the
/// positions the policy's cache held when that step attended.
pub fn shadow_error(full_run: &StepTrace, policy_run: &StepTrace) -> Result<Vec<ErrorRecord>> {
    if full_run.model != policy_run.model {
        return Err(mismatch("runs use different models"));
    }
    if full_run.prompt != policy_run.prompt {
        return Err(mismatch("runs use different prompts"));
    }
    if full_run.steps.len() != policy_run.steps.len() {
        return Err(mismatch(format!(
            "full run has {} steps, policy run {}",
            full_run.steps.len(),
            policy_run.steps.len()
        )));
    }
    if let Some((a, _)) = full_run
        .steps
        .iter()
        .zip(&policy_run.steps)
        .find(|(a, b)| a.token != b.token || a.position != b.position)
    {
        return Err(mismatch(format!("token traces diverge at step {}", a.step)));
    }
    if full_run.steps.iter().any(|s| s.evicted.iter().any(|e| !e.is_empty())) {
        return Err(mismatch("reference run evicted entries"));
    }
    let capture = full_run
        .capture
        .as_ref()
        .ok_or_else(|| mismatch("reference run carries no captured queries and keys"))?;
    let n_kv = full_run.model.n_kv_heads;
    let attended = policy_run.attended_positions()?;
    let mut records = Vec::with_capacity(attended.len() * full_run.n_stores());
    for (i, per_store) in attended.iter().enumerate() {
        let visible = full_run.steps[i].position + 1;
        for (s, keep) in per_store.iter().enumerate() {
            let keys = &capture.keys[s][..visible];
            let values = &capture.values[s][..visible];
            let scorer = SubsetScorer::new(&capture.queries[i][s], keys, values)?;
            records.push(ErrorRecord {
                step: i,
                layer: s / n_kv,
                kv_head: s % n_kv,
                l2_error: scorer.error(keep),
            });
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_entries(seed: u64, n: usize, d: usize) -> (Vec<f64>, Vec<KvEntry<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vecd = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
        let q = vecd(&mut rng);
        let entries = (0..n)
            .map(|p| KvEntry {
                key: vecd(&mut rng),
                value: vecd(&mut rng),
                position: p,
                token: 0,
            })
            .collect();
        (q, entries)
    }

    fn binomial(n: usize, k: usize) -> usize {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    #[test]
    fn full_budget_is_exact() {
        let (q, e) = random_entries(1, 8, 4);
        let (keep, err) = optimal_subset(&q, &e, 8, 2).unwrap();
        assert_eq!(keep, (0..8).collect::<Vec<_>>());
        assert_eq!(err, 0.0);
    }

    #[test]
    fn recent_only_budget_is_forced() {
        let (q, e) = random_entries(2, 8, 4);
        let (keep, err) = optimal_subset(&q, &e, 3, 3).unwrap();
        assert_eq!(keep, vec![5, 6, 7]);
        let (keys, values) = entry_columns(&e);
        let scorer = SubsetScorer::new(&[q], &keys, &values).unwrap();
        assert_eq!(err, scorer.error(&[5, 6, 7]));
    }

    #[test]
    fn enumeration_visits_every_subset() {
        // Compare with a plain scan over all bitmasks of the right popcount.
        for seed in 0..20 {
            let (q, e) = random_entries(seed, 9, 3);
            let (keys, values) = entry_columns(&e);
            let scorer = SubsetScorer::new(std::slice::from_ref(&q), &keys, &values).unwrap();
            let mut best = f64::INFINITY;
            let mut count = 0;
            for mask in 0u32..(1 << 7) {
                if mask.count_ones() != 3 {
                    continue;
                }
                count += 1;
                let keep: Vec<usize> = (0..7).filter(|j| mask >> j & 1 == 1).chain([7, 8]).collect();
                best = best.min(scorer.error(&keep));
            }
            assert_eq!(count, binomial(7, 3));
            assert_eq!(scorer.optimal(5, 2).unwrap().1, best);
        }
    }

    #[test]
    fn unconstrained_never_worse() {
        for seed in 0..20 {
            let (q, e) = random_entries(seed + 100, 8, 4);
            let constrained = optimal_subset(&q, &e, 5, 2).unwrap().1;
            let free = unconstrained_optimal_subset(&q, &e, 5).unwrap().1;
            assert!(free <= constrained);
        }
    }

    #[test]
    fn scorer_matches_scaled_dot_attention() {
        let (q, e) = random_entries(7, 6, 4);
        let (keys, values) = entry_columns(&e);
        let scorer = SubsetScorer::new(std::slice::from_ref(&q), &keys, &values).unwrap();
        let keep = [0, 2, 5];
        let ks: Vec<&Vec<f64>> = keep.iter().map(|&i| &keys[i]).collect();
        let vs: Vec<&Vec<f64>> = keep.iter().map(|&i| &values[i]).collect();
        let (_, sub) = crate::tensor::scaled_dot_attention(&q, &ks, &vs).unwrap();
        let (_, full) = crate::tensor::scaled_dot_attention(&q, &keys, &values).unwrap();
        let direct = sub.iter().zip(&full).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((scorer.error(&keep) - direct).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_instances() {
        let (q, e) = random_entries(3, 23, 2);
        assert!(matches!(
            optimal_subset(&q, &e, 5, 2),
            Err(Error::InstanceTooLarge { size: 23, max: 22 })
        ));
        let (q, e) = random_entries(3, 6, 2);
        assert!(matches!(optimal_subset(&q, &e, 7, 2), Err(Error::InvalidParam(_))));
        assert!(matches!(optimal_subset(&q, &e, 2, 3), Err(Error::InvalidParam(_))));
        assert!(matches!(optimal_subset::<f64>(&q, &[], 0, 0), Err(Error::EmptyCache)));
    }
}
