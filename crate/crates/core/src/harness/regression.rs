use rayon::prelude::*;

use super::{run_trace, seeded_prompt, PromptSource, RunConfig, RunOptions};
use crate::cache::{EvictionPolicyConfig, Fusion, PolicyKind};
use crate::error::{Error, Result};
use crate::model::init_model;
use crate::oracle::{SubsetScorer, MAX_ORACLE_ENTRIES};

pub const REGRESSION_HEADER: &str = "seed,policy,error,optimal_error";

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionRow {
    pub seed: u64,
    pub policy: String,
    pub error: f64,
    pub optimal_error: f64,
}

/// The policies scored against the oracle for a configured policy. A MorphKV
/// config brings both fusions plus the baselines at the same total budget;
/// anything else is scored alone.
pub fn comparison_policies(policy: &EvictionPolicyConfig) -> Vec<(String, EvictionPolicyConfig)> {
    if policy.kind != PolicyKind::MorphKv {
        return vec![(policy.kind.name().to_string(), policy.clone())];
    }
    let budget = policy.budget();
    let mut out = vec![
        ("morphkv_sum".to_string(), policy.clone().with_fusion(Fusion::Sum)),
        ("morphkv_max".to_string(), policy.clone().with_fusion(Fusion::Max)),
        ("scissorhands".to_string(), EvictionPolicyConfig::scissorhands(budget)),
    ];
    if budget >= 2 {
        out.push((
            "streamingllm".to_string(),
            EvictionPolicyConfig::streaming_llm(1, budget - 1),
        ));
    }
    out.push((
        "h2o".to_string(),
        EvictionPolicyConfig::h2o(policy.capacity, policy.window),
    ));
    out
}

/// Number of trailing consecutive positions ending at the newest one.
fn trailing_run(keep: &[usize]) -> usize {
    keep.iter()
        .rev()
        .zip(keep.iter().rev().skip(1))
        .take_while(|(a, b)| **a == **b + 1)
        .count()
        + usize::from(!keep.is_empty())
}

fn instance(cfg: &RunConfig, seed: u64) -> Result<Vec<RegressionRow>> {
    let model = cfg.model.clone().with_seed(seed);
    let prompt = match &cfg.prompt {
        PromptSource::Seeded { length } => seeded_prompt(model.vocab_size, *length, seed),
        PromptSource::File { .. } => cfg.prompt_tokens()?,
    };
    let steps = cfg.run.decode_steps;
    let weights = init_model::<f64>(&model)?;
    let memory = cfg.memory();
    let full = run_trace(
        &weights,
        &EvictionPolicyConfig::full_attention(),
        memory,
        &prompt,
        steps,
        &RunOptions {
            capture: true,
            ..RunOptions::default()
        },
    )?;
    let capture = full.capture.as_ref().expect("capture requested");
    let forced = RunOptions {
        forced_tokens: Some(full.generated()),
        ..RunOptions::default()
    };
    let last = steps;
    let visible = full.steps[last].position + 1;
    let scorers = (0..full.n_stores())
        .map(|s| {
            SubsetScorer::new(
                &capture.queries[last][s],
                &capture.keys[s][..visible],
                &capture.values[s][..visible],
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let recent = cfg.policy.window + 1;

    comparison_policies(&cfg.policy)
        .into_iter()
        .map(|(name, policy)| {
            let trace = run_trace(&weights, &policy, memory, &prompt, steps, &forced)?;
            let attended = trace.attended_positions()?;
            let mut err2 = 0.0;
            let mut opt2 = 0.0;
            for (scorer, keep) in scorers.iter().zip(&attended[last]) {
                let err = scorer.error(keep);
                let (_, opt) = scorer.optimal(keep.len(), recent.min(trailing_run(keep)))?;
                if opt > err {
                    return Err(Error::InternalInvariantViolation(format!(
                        "{name} beat the exhaustive optimum on seed {seed}: {err} < {opt}"
                    )));
                }
                err2 += err * err;
                opt2 += opt * opt;
            }
            Ok(RegressionRow {
                seed,
                policy: name,
                error: err2.sqrt(),
                optimal_error: opt2.sqrt(),
            })
        })
        .collect()
}

/// Scores every comparison policy against the exhaustive optimum at the final
/// decode step of `instances` seeded runs (seeds `model.seed ..`).
///
/// The optimum has the same total budget as the policy and keeps the newest
/// `R + 1` entries, the recent window plus the token being decoded.
pub fn oracle_regression(cfg: &RunConfig, instances: usize) -> Result<Vec<RegressionRow>> {
    cfg.validate()?;
    let entries = cfg.prompt_tokens()?.len() + cfg.run.decode_steps;
    if entries > MAX_ORACLE_ENTRIES {
        return Err(Error::InstanceTooLarge {
            size: entries,
            max: MAX_ORACLE_ENTRIES,
        });
    }
    let rows = (0..instances as u64)
        .into_par_iter()
        .map(|i| instance(cfg, cfg.model.seed.wrapping_add(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.into_iter().flatten().collect())
}

/// CSV with full-precision floats, so a rerun reproduces it byte for byte.
pub fn regression_csv(rows: &[RegressionRow]) -> String {
    let mut out = format!("{REGRESSION_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:?},{:?}\n",
            r.seed, r.policy, r.error, r.optimal_error
        ));
    }
    out
}

/// Mean error per policy, in first-appearance order.
pub fn regression_means(rows: &[RegressionRow]) -> Vec<(String, f64)> {
    let mut means: Vec<(String, f64, usize)> = Vec::new();
    for r in rows {
        match means.iter_mut().find(|(p, _, _)| *p == r.policy) {
            Some(m) => {
                m.1 += r.error;
                m.2 += 1;
            }
            None => means.push((r.policy.clone(), r.error, 1)),
        }
    }
    means.into_iter().map(|(p, s, n)| (p, s / n as f64)).collect()
}
