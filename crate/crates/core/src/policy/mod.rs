//! Uniform driver over MorphKV and the baseline policies.

mod baselines;

pub use baselines::{h2o_step, scissorhands_step, snapkv_policy, streamingllm_step, CumulativeScoreState};

use crate::cache::{
    morphkv_step_with, prefill_compress, record_prefill_profiles, EvictionPolicyConfig, KvCacheState, PolicyKind,
    ScoreRouting,
};
use crate::error::{Error, Result};
use crate::model::StepOutput;
use crate::scalar::Scalar;

/// Evicted positions per store for one step.
pub type EvictionLog = Vec<Vec<usize>>;

/// Applies one configured policy after prefill and after every decode step.
///
/// Holds whatever cross-step state the policy needs (H2O's running sums).
#[derive(Debug, Clone)]
pub struct PolicyEngine<T> {
    cfg: EvictionPolicyConfig,
    routing: ScoreRouting,
    h2o: Option<CumulativeScoreState<T>>,
}

impl<T: Scalar> PolicyEngine<T> {
    pub fn new(cfg: EvictionPolicyConfig, n_layers: usize) -> Result<Self> {
        cfg.validate(n_layers)?;
        Ok(Self {
            cfg,
            routing: ScoreRouting::Aggregate,
            h2o: None,
        })
    }

    pub fn with_routing(mut self, routing: ScoreRouting) -> Self {
        self.routing = routing;
        self
    }

    pub fn config(&self) -> &EvictionPolicyConfig {
        &self.cfg
    }

    /// Runs right after prefill.
    pub fn on_prefill(&mut self, cache: &mut KvCacheState<T>, out: &StepOutput<T>) -> Result<EvictionLog> {
        let cfg = &self.cfg;
        let n_stores = cache.stores().len();
        let none = || vec![Vec::new(); n_stores];
        match cfg.kind {
            PolicyKind::MorphKv => {
                record_prefill_profiles(cache, out, self.routing)?;
                if cfg.prefill_compress {
                    prefill_compress(cache, cfg)
                } else {
                    Ok(none())
                }
            }
            PolicyKind::Scissorhands if cfg.prefill_compress => scissorhands_step(cache, cfg),
            PolicyKind::StreamingLlm if cfg.prefill_compress => streamingllm_step(cache, cfg),
            PolicyKind::H2o => {
                self.h2o = Some(CumulativeScoreState::new(cache.stores().len(), out.position + 1));
                Ok(none())
            }
            PolicyKind::SnapKv => snapkv_policy(cache, out, cfg),
            _ => Ok(none()),
        }
    }

    /// Runs after decode step `step_index` (1-based) appended its token.
    pub fn on_decode(
        &mut self,
        cache: &mut KvCacheState<T>,
        out: &StepOutput<T>,
        step_index: usize,
    ) -> Result<EvictionLog> {
        let cfg = &self.cfg;
        match cfg.kind {
            PolicyKind::MorphKv => morphkv_step_with(cache, out, cfg, step_index, self.routing),
            PolicyKind::Scissorhands => scissorhands_step(cache, cfg),
            PolicyKind::StreamingLlm => streamingllm_step(cache, cfg),
            PolicyKind::H2o => {
                let state = self
                    .h2o
                    .as_mut()
                    .ok_or_else(|| Error::InternalInvariantViolation("h2o decode before prefill".into()))?;
                h2o_step(cache, out, state, cfg)
            }
            PolicyKind::SnapKv | PolicyKind::FullAttention => Ok(vec![Vec::new(); cache.stores().len()]),
        }
    }
}
