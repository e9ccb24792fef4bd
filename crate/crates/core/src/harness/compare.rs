use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_trace, to_json, RunConfig, RunOptions};
use crate::cache::EvictionPolicyConfig;
use crate::error::{Error, Result};
use crate::metrics::relative_cache_ratio;
use crate::model::init_model;
use crate::oracle::{shadow_error, ErrorRecord};
use crate::trace::StepTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub step: usize,
    pub policy: String,
    /// Entries summed over every store.
    pub occupancy: usize,
    pub bytes: u64,
    /// Bytes relative to an unevicted grouped cache.
    pub ratio: f64,
    /// Mean output error over every (layer, kv_head).
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: String,
    pub final_occupancy: usize,
    pub final_bytes: u64,
    pub final_ratio: f64,
    pub mean_error: f64,
    pub max_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// The replayed decode tokens.
    pub tokens: Vec<u32>,
    pub rows: Vec<ComparisonRow>,
    pub summary: Vec<PolicySummary>,
    #[serde(skip)]
    pub traces: Vec<StepTrace>,
    #[serde(skip)]
    pub errors: Vec<Vec<ErrorRecord>>,
}

fn check_shared(configs: &[RunConfig]) -> Result<Vec<u32>> {
    if configs.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "compare needs at least 2 configs, got {}",
            configs.len()
        )));
    }
    let first = &configs[0];
    let prompt = first.prompt_tokens()?;
    for (i, c) in configs.iter().enumerate().skip(1) {
        if c.model != first.model {
            return Err(Error::TraceMismatch(format!(
                "config {i} uses a different model or seed"
            )));
        }
        if c.run.decode_steps != first.run.decode_steps {
            return Err(Error::TraceMismatch(format!(
                "config {i} decodes a different number of steps"
            )));
        }
        if c.prompt_tokens()? != prompt {
            return Err(Error::TraceMismatch(format!("config {i} uses a different prompt")));
        }
    }
    Ok(prompt)
}

/// Runs every config on one token sequence and tabulates bytes, ratios and
/// output error per step.
///
/// The first config decodes greedily; a full-attention shadow run and every
/// config then replay its tokens.
pub fn compare(configs: &[RunConfig]) -> Result<ComparisonReport> {
    for c in configs {
        c.validate()?;
    }
    let prompt = check_shared(configs)?;
    let first = &configs[0];
    let steps = first.run.decode_steps;
    let weights = init_model::<f64>(&first.model)?;
    let lead = run_trace(
        &weights,
        &first.policy,
        first.memory(),
        &prompt,
        steps,
        &RunOptions::default(),
    )?;
    let tokens = lead.generated();
    let forced = RunOptions {
        forced_tokens: Some(tokens.clone()),
        ..RunOptions::default()
    };
    let shadow = run_trace(
        &weights,
        &EvictionPolicyConfig::full_attention(),
        first.memory(),
        &prompt,
        steps,
        &RunOptions {
            capture: true,
            ..forced.clone()
        },
    )?;

    let runs = configs
        .par_iter()
        .map(|c| {
            let opts = RunOptions {
                debug_invariants: c.run.debug_invariants,
                ..forced.clone()
            };
            let trace = run_trace(&weights, &c.policy, c.memory(), &prompt, steps, &opts)?;
            let errors = shadow_error(&shadow, &trace)?;
            Ok((trace, errors))
        })
        .collect::<Result<Vec<_>>>()?;

    let n_stores = shadow.n_stores();
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (c, (trace, errors)) in configs.iter().zip(&runs) {
        let label = c.label();
        let ratios = relative_cache_ratio(&trace.bytes(), &trace.full_attention_bytes())?;
        let step_errors: Vec<f64> = errors
            .chunks(n_stores)
            .map(|chunk| chunk.iter().map(|r| r.l2_error).sum::<f64>() / n_stores as f64)
            .collect();
        for ((rec, ratio), error) in trace.steps.iter().zip(&ratios).zip(&step_errors) {
            rows.push(ComparisonRow {
                step: rec.step,
                policy: label.clone(),
                occupancy: rec.occupancy.iter().sum(),
                bytes: rec.bytes,
                ratio: *ratio,
                error: *error,
            });
        }
        let last = trace.steps.last().ok_or(Error::EmptyTrace)?;
        summary.push(PolicySummary {
            policy: label,
            final_occupancy: last.occupancy.iter().sum(),
            final_bytes: last.bytes,
            final_ratio: *ratios.last().ok_or(Error::EmptyTrace)?,
            mean_error: step_errors.iter().sum::<f64>() / step_errors.len() as f64,
            max_error: step_errors.iter().copied().fold(0.0, f64::max),
        });
    }
    let (traces, errors) = runs.into_iter().unzip();
    Ok(ComparisonReport {
        tokens,
        rows,
        summary,
        traces,
        errors,
    })
}

pub const COMPARE_HEADER: &str = "step,policy,occupancy,bytes,ratio,error";
pub const SUMMARY_HEADER: &str = "policy,final_occupancy,final_bytes,final_ratio,mean_error,max_error";

impl ComparisonReport {
    pub fn rows_csv(&self) -> String {
        let mut out = format!("{COMPARE_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:?},{:?}\n",
                r.step, r.policy, r.occupancy, r.bytes, r.ratio, r.error
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = format!("{SUMMARY_HEADER}\n");
        for s in &self.summary {
            out.push_str(&format!(
                "{},{},{},{:?},{:?},{:?}\n",
                s.policy, s.final_occupancy, s.final_bytes, s.final_ratio, s.mean_error, s.max_error
            ));
        }
        out
    }

    /// Bytes per step for the policy labelled `label`.
    pub fn bytes_of(&self, label: &str) -> Vec<u64> {
        self.rows
            .iter()
            .filter(|r| r.policy == label)
            .map(|r| r.bytes)
            .collect()
    }
}

/// Writes `compare.csv`, `summary.csv` and `compare.json` into `dir`.
pub fn write_comparison(report: &ComparisonReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        (dir.join("compare.csv"), report.rows_csv()),
        (dir.join("summary.csv"), report.summary_csv()),
        (dir.join("compare.json"), to_json(report)),
    ];
    for (path, contents) in &files {
        fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}
