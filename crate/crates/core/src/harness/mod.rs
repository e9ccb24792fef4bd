//! Run configuration, trace generation and report emission.

mod compare;
mod regression;

pub use compare::{compare, write_comparison, ComparisonReport, ComparisonRow, PolicySummary};
pub use regression::{
    comparison_policies, oracle_regression, regression_csv, regression_means, RegressionRow, REGRESSION_HEADER,
};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{CacheSnapshot, EvictionPolicyConfig, KvCacheState, PolicyKind, ScoreRouting};
use crate::error::{Error, Result};
use crate::metrics::{kv_bytes, relative_cache_ratio, repetition_rate, MemoryModel, RepetitionReport};
use crate::model::{decode_step, init_model, prefill, DecoderWeights, ModelConfig, StepOutput};
use crate::policy::PolicyEngine;
use crate::tensor::argmax;
use crate::trace::{Capture, StepRecord, StepTrace};

/// Where the prompt comes from: `length = N` for seeded random tokens, or
/// `file = "path"` for whitespace-separated token ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PromptSource {
    Seeded { length: usize },
    File { file: PathBuf },
}

fn default_bytes_per_scalar() -> usize {
    8
}

fn default_ngram() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    pub decode_steps: usize,
    #[serde(default)]
    pub debug_invariants: bool,
    #[serde(default = "default_bytes_per_scalar")]
    pub bytes_per_scalar: usize,
    #[serde(default)]
    pub include_profile: bool,
    /// Gram length for the repetition report.
    #[serde(default = "default_ngram")]
    pub ngram: usize,
    /// Column label in reports; defaults to the policy name.
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSettings {
    pub dir: Option<PathBuf>,
    pub steps_csv: String,
    pub trace_json: String,
    pub repetition_json: String,
}

impl Default for OutputSettings {
    fn default() -> Self {
        Self {
            dir: None,
            steps_csv: "steps.csv".into(),
            trace_json: "trace.json".into(),
            repetition_json: "repetition.json".into(),
        }
    }
}

/// One run, as written in a TOML file with `[model]`, `[policy]`,
/// `[prompt]`, `[run]` and `[outputs]` sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    pub policy: EvictionPolicyConfig,
    pub prompt: PromptSource,
    pub run: RunSettings,
    #[serde(default)]
    pub outputs: OutputSettings,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn new(model: ModelConfig, policy: EvictionPolicyConfig, prompt_len: usize, decode_steps: usize) -> Self {
        Self {
            model,
            policy,
            prompt: PromptSource::Seeded { length: prompt_len },
            run: RunSettings {
                decode_steps,
                debug_invariants: false,
                bytes_per_scalar: default_bytes_per_scalar(),
                include_profile: false,
                ngram: default_ngram(),
                label: None,
            },
            outputs: OutputSettings::default(),
            base_dir: PathBuf::from("."),
        }
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: base_dir.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.base_dir = base;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self
    }

    pub fn with_policy(mut self, policy: EvictionPolicyConfig) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.run.label = Some(label.to_string());
        self
    }

    pub fn label(&self) -> String {
        self.run
            .label
            .clone()
            .unwrap_or_else(|| self.policy.kind.name().to_string())
    }

    pub fn memory(&self) -> MemoryModel {
        MemoryModel::new(self.run.bytes_per_scalar).with_profile(self.run.include_profile)
    }

    pub fn output_dir(&self) -> Option<PathBuf> {
        self.outputs.dir.as_ref().map(|d| self.base_dir.join(d))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.policy.validate(self.model.n_layers)?;
        if self.run.bytes_per_scalar == 0 {
            return Err(Error::InvalidConfig("bytes_per_scalar must be positive".into()));
        }
        if self.run.ngram == 0 {
            return Err(Error::InvalidConfig("ngram must be at least 1".into()));
        }
        if let PromptSource::Seeded { length: 0 } = self.prompt {
            return Err(Error::InvalidConfig("prompt length must be at least 1".into()));
        }
        Ok(())
    }

    /// Resolves the prompt to token ids.
    pub fn prompt_tokens(&self) -> Result<Vec<u32>> {
        match &self.prompt {
            PromptSource::Seeded { length } => Ok(seeded_prompt(self.model.vocab_size, *length, self.model.seed)),
            PromptSource::File { file } => {
                let path = self.base_dir.join(file);
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let tokens = text
                    .split_whitespace()
                    .map(|t| t.parse::<u32>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Parse {
                        path: path.clone(),
                        message: e.to_string(),
                    })?;
                if tokens.is_empty() {
                    return Err(Error::InvalidConfig(format!("{} holds no tokens", path.display())));
                }
                Ok(tokens)
            }
        }
    }
}

/// Uniform random token ids, drawn from a stream separate from the weights.
pub fn seeded_prompt(vocab_size: usize, length: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..length).map(|_| rng.gen_range(0..vocab_size as u32)).collect()
}

/// Knobs for [`run_trace`] that are not part of a run file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Replay these tokens instead of decoding greedily.
    pub forced_tokens: Option<Vec<u32>>,
    /// Keep logits, queries, keys and values for oracle work.
    pub capture: bool,
    pub debug_invariants: bool,
    pub routing: ScoreRouting,
    /// Steps after which to snapshot the cache.
    pub snapshot_steps: Vec<usize>,
}

fn capture_step(capture: &mut Capture, out: &StepOutput<f64>) {
    capture.logits.push(out.logits.clone());
    capture
        .queries
        .push(out.attention.iter().map(|g| g.queries.to_vec()).collect());
    capture
        .outputs
        .push(out.attention.iter().map(|g| g.outputs.to_vec()).collect());
}

fn capture_newest(capture: &mut Capture, cache: &KvCacheState<f64>, from_position: usize) {
    if capture.keys.is_empty() {
        capture.keys = vec![Vec::new(); cache.stores().len()];
        capture.values = vec![Vec::new(); cache.stores().len()];
    }
    for (s, store) in cache.stores().iter().enumerate() {
        for e in store.entries().iter().filter(|e| e.position >= from_position) {
            capture.keys[s].push(e.key.clone());
            capture.values[s].push(e.value.clone());
        }
    }
}

/// Drives prefill and `decode_steps` decode steps under one policy.
pub fn run_trace(
    weights: &DecoderWeights<f64>,
    policy: &EvictionPolicyConfig,
    memory: MemoryModel,
    prompt: &[u32],
    decode_steps: usize,
    opts: &RunOptions,
) -> Result<StepTrace> {
    let model = weights.config().clone();
    if let Some(forced) = &opts.forced_tokens {
        if forced.len() < decode_steps {
            return Err(Error::InvalidParam(format!(
                "{} forced tokens for {decode_steps} decode steps",
                forced.len()
            )));
        }
    }
    let mut engine = PolicyEngine::<f64>::new(policy.clone(), model.n_layers)?.with_routing(opts.routing);
    let mut cache = weights.new_cache(policy.window);
    let mut capture = opts.capture.then(Capture::default);
    let mut trace = StepTrace {
        model: model.clone(),
        policy: policy.clone(),
        memory,
        prompt: prompt.to_vec(),
        steps: Vec::with_capacity(decode_steps + 1),
        snapshots: Vec::new(),
        capture: None,
    };
    let mut checker = opts
        .debug_invariants
        .then(|| InvariantChecker::new(policy, prompt.len(), cache.stores().len()));

    let mut out = prefill(weights, prompt, &mut cache)?;
    for step in 0..=decode_steps {
        if step > 0 {
            let token = match &opts.forced_tokens {
                Some(forced) => forced[step - 1],
                None => argmax(&out.logits).expect("vocabulary is non-empty") as u32,
            };
            out = decode_step(weights, token, &mut cache)?;
        }
        if let Some(c) = capture.as_mut() {
            capture_step(c, &out);
            capture_newest(c, &cache, if step == 0 { 0 } else { out.position });
        }
        let evicted = if step == 0 {
            engine.on_prefill(&mut cache, &out)?
        } else {
            engine.on_decode(&mut cache, &out, step)?
        };
        if let Some(ch) = checker.as_mut() {
            ch.check(&cache, step, out.position, &evicted)?;
        }
        let occupancy = cache.occupancies();
        let bytes = kv_bytes(policy, std::slice::from_ref(&occupancy), &model, &memory)[0];
        trace.steps.push(StepRecord {
            step,
            token: out.token,
            position: out.position,
            occupancy,
            evicted,
            bytes,
        });
        if opts.snapshot_steps.contains(&step) {
            trace
                .snapshots
                .push(CacheSnapshot::capture(&cache, step, policy.fusion));
        }
    }
    trace.capture = capture;
    Ok(trace)
}

/// Per-step checks of every cache and policy invariant.
struct InvariantChecker {
    cfg: EvictionPolicyConfig,
    prompt_len: usize,
    live: Vec<BTreeSet<usize>>,
}

impl InvariantChecker {
    fn new(cfg: &EvictionPolicyConfig, prompt_len: usize, n_stores: usize) -> Self {
        Self {
            cfg: cfg.clone(),
            prompt_len,
            live: vec![BTreeSet::new(); n_stores],
        }
    }

    fn check(&mut self, cache: &KvCacheState<f64>, step: usize, position: usize, evicted: &[Vec<usize>]) -> Result<()> {
        let fail = |detail: String| Err(Error::InvariantViolation { step, detail });
        if let Err(detail) = cache.check_alignment() {
            return fail(detail);
        }
        if evicted.len() != self.live.len() {
            return fail(format!(
                "eviction log covers {} of {} stores",
                evicted.len(),
                self.live.len()
            ));
        }
        let cfg = &self.cfg;
        for (s, store) in cache.stores().iter().enumerate() {
            let (layer, _) = cache.store_coords(s);
            let live = &mut self.live[s];
            if step == 0 {
                live.extend(0..self.prompt_len);
            } else {
                live.insert(position);
            }
            for p in &evicted[s] {
                if !live.remove(p) {
                    return fail(format!("store {s} evicted position {p}, which was not live"));
                }
            }
            let positions = store.positions();
            if !positions.iter().copied().eq(live.iter().copied()) {
                return fail(format!("store {s} holds positions that disagree with its eviction log"));
            }
            if store.profile().len() > cfg.window {
                return fail(format!(
                    "store {s} profile holds {} rows for a window of {}",
                    store.profile().len(),
                    cfg.window
                ));
            }
            let n = store.occupancy();
            let evicting_step = step > 0 || cfg.prefill_compress;
            let prompt_entries = positions.partition_point(|&p| p < self.prompt_len);
            let bound = match cfg.kind {
                PolicyKind::MorphKv => {
                    let on_schedule = match (step, cfg.eviction_interval) {
                        (0, _) => cfg.prefill_compress,
                        (_, None) => true,
                        (i, Some(t)) => i % t == 0,
                    };
                    (layer >= cfg.protected_layers && on_schedule).then_some(cfg.budget())
                }
                PolicyKind::Scissorhands if evicting_step => Some(cfg.window),
                PolicyKind::StreamingLlm if evicting_step => Some(cfg.sink_count + cfg.window),
                PolicyKind::H2o if step > 0 => Some(prompt_entries + cfg.budget()),
                PolicyKind::SnapKv if step > 0 && !evicted[s].is_empty() => {
                    return fail(format!(
                        "store {s} evicted during decode under one-shot prompt selection"
                    ));
                }
                PolicyKind::FullAttention => {
                    if n != position + 1 {
                        return fail(format!("full cache store {s} holds {n} entries at position {position}"));
                    }
                    None
                }
                _ => None,
            };
            if let Some(b) = bound {
                if n > b {
                    return fail(format!("store {s} holds {n} entries, bound is {b}"));
                }
            }
            if cfg.kind == PolicyKind::SnapKv && prompt_entries > cfg.prefill_budget {
                return fail(format!(
                    "store {s} keeps {prompt_entries} prompt entries over a budget of {}",
                    cfg.prefill_budget
                ));
            }
        }
        Ok(())
    }
}

/// Builds the model, runs the configured policy, and returns the trace.
pub fn run(cfg: &RunConfig) -> Result<StepTrace> {
    cfg.validate()?;
    let weights = init_model::<f64>(&cfg.model)?;
    let prompt = cfg.prompt_tokens()?;
    let opts = RunOptions {
        debug_invariants: cfg.run.debug_invariants,
        ..RunOptions::default()
    };
    run_trace(
        &weights,
        &cfg.policy,
        cfg.memory(),
        &prompt,
        cfg.run.decode_steps,
        &opts,
    )
}

/// Runs the configured policy and snapshots the cache after each listed step
/// (the final step when the list is empty).
pub fn inspect(cfg: &RunConfig, steps: &[usize]) -> Result<Vec<CacheSnapshot>> {
    cfg.validate()?;
    let weights = init_model::<f64>(&cfg.model)?;
    let prompt = cfg.prompt_tokens()?;
    let snapshot_steps = if steps.is_empty() {
        vec![cfg.run.decode_steps]
    } else {
        steps.to_vec()
    };
    if let Some(&bad) = snapshot_steps.iter().find(|&&s| s > cfg.run.decode_steps) {
        return Err(Error::InvalidParam(format!(
            "step {bad} is past the last step {}",
            cfg.run.decode_steps
        )));
    }
    let opts = RunOptions {
        debug_invariants: cfg.run.debug_invariants,
        snapshot_steps,
        ..RunOptions::default()
    };
    Ok(run_trace(
        &weights,
        &cfg.policy,
        cfg.memory(),
        &prompt,
        cfg.run.decode_steps,
        &opts,
    )?
    .snapshots)
}

pub const STEPS_HEADER: &str = "step,policy,occupancy,bytes,ratio";

/// Per-step CSV: total entries over all stores, bytes, and bytes relative to
/// an unevicted grouped cache.
pub fn steps_csv(trace: &StepTrace, label: &str) -> Result<String> {
    let ratios = relative_cache_ratio(&trace.bytes(), &trace.full_attention_bytes())?;
    let mut out = String::from(STEPS_HEADER);
    out.push('\n');
    for (rec, ratio) in trace.steps.iter().zip(ratios) {
        let occupancy: usize = rec.occupancy.iter().sum();
        out.push_str(&format!("{},{label},{occupancy},{},{ratio:?}\n", rec.step, rec.bytes));
    }
    Ok(out)
}

/// Recomputes bytes from the saved occupancies and rebuilds the reports.
pub fn recompute_reports(trace: &StepTrace, label: &str, ngram: usize) -> Result<(String, RepetitionReport)> {
    trace.validate()?;
    let bytes = kv_bytes(&trace.policy, &trace.occupancy_trace(), &trace.model, &trace.memory);
    if let Some(rec) = trace.steps.iter().zip(&bytes).find(|(r, b)| r.bytes != **b) {
        return Err(Error::InvariantViolation {
            step: rec.0.step,
            detail: format!("recorded {} bytes, occupancy implies {}", rec.0.bytes, rec.1),
        });
    }
    Ok((steps_csv(trace, label)?, repetition_rate(&trace.generated(), ngram)?))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn to_json<S: Serialize>(value: &S) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types always serialize");
    s.push('\n');
    s
}

/// Writes the steps CSV, trace JSON and repetition JSON into `dir`.
pub fn write_run_outputs(cfg: &RunConfig, trace: &StepTrace, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (csv, repetition) = recompute_reports(trace, &cfg.label(), cfg.run.ngram)?;
    let files = [
        (dir.join(&cfg.outputs.steps_csv), csv),
        (dir.join(&cfg.outputs.trace_json), to_json(trace)),
        (dir.join(&cfg.outputs.repetition_json), to_json(&repetition)),
    ];
    for (path, contents) in &files {
        write(path, contents)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

/// Reads a trace written by [`write_run_outputs`].
pub fn load_trace(path: &Path) -> Result<StepTrace> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
