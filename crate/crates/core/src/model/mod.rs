//! A tiny decoder-only transformer with seeded weights.
//!
//! Pre-norm blocks (parameter-free RMS norm), rotary attention with MHA or
//! GQA head layouts, a SiLU MLP and an untied unembedding. The model writes
//! into a [`KvCacheState`] and reports, for each (layer, kv-head), the
//! attention rows of the query heads in that group so eviction policies can
//! consume them.

mod io;
mod output;

pub use io::{export_weights, import_weights, load_weights, save_weights, WEIGHT_MAGIC, WEIGHT_VERSION};
pub use output::{GroupAttention, StepOutput, WindowRow};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::{KvCacheState, KvEntry};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{apply_rope, rms_norm, scaled_dot_attention, silu, Matrix};

/// Hidden width of the MLP as a multiple of `d_model`.
pub const FFN_MULTIPLIER: usize = 2;

/// Architecture of the toy decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    /// Query heads `M`.
    pub n_query_heads: usize,
    /// Key/value heads `M'`.
    pub n_kv_heads: usize,
    /// Per-head dimension `d_h`.
    pub head_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_query_heads: 8,
            n_kv_heads: 2,
            head_dim: 16,
            vocab_size: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.n_query_heads * self.head_dim
    }

    /// Query heads per KV head, `M / M'`.
    pub fn group_size(&self) -> usize {
        self.n_query_heads / self.n_kv_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.n_kv_heads == 0 || self.n_query_heads == 0 {
            return fail("head counts must be at least 1".into());
        }
        if !self.n_query_heads.is_multiple_of(self.n_kv_heads) {
            return fail(format!(
                "n_query_heads {} is not a multiple of n_kv_heads {}",
                self.n_query_heads, self.n_kv_heads
            ));
        }
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return fail(format!("head_dim {} must be even and positive", self.head_dim));
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size {} must be at least 2", self.vocab_size));
        }
        let small = [self.n_layers, self.n_query_heads, self.n_kv_heads, self.head_dim];
        if small.iter().any(|&v| v > u16::MAX as usize) || self.vocab_size > u32::MAX as usize {
            return fail("dimension exceeds the weight file header range".into());
        }
        Ok(())
    }
}

/// Which attention code path the model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionPath {
    /// Iterate KV heads and serve each one's query-head group.
    #[default]
    Grouped,
    /// Iterate query heads independently; requires `M' = M`.
    PerHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub w_up: Matrix<T>,
    pub w_down: Matrix<T>,
}

impl<T: Scalar> LayerWeights<T> {
    fn matrices(&self) -> [&Matrix<T>; 6] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w_up, &self.w_down]
    }
}

/// Immutable model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights<T> {
    config: ModelConfig,
    pub embedding: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub unembedding: Matrix<T>,
    path: AttentionPath,
}

/// Matrix shapes in generation (and serialisation) order.
pub(crate) fn weight_shapes(config: &ModelConfig) -> Vec<(usize, usize)> {
    let d = config.d_model();
    let kv = config.kv_dim();
    let ffn = FFN_MULTIPLIER * d;
    let mut shapes = vec![(config.vocab_size, d)];
    for _ in 0..config.n_layers {
        shapes.extend([(d, d), (d, kv), (d, kv), (d, d), (d, ffn), (ffn, d)]);
    }
    shapes.push((d, config.vocab_size));
    shapes
}

impl<T: Scalar> DecoderWeights<T> {
    pub(crate) fn from_matrices(config: ModelConfig, mats: Vec<Matrix<T>>) -> Result<Self> {
        let shapes = weight_shapes(&config);
        if mats.len() != shapes.len() || mats.iter().zip(&shapes).any(|(m, &s)| m.shape() != s) {
            return Err(Error::InvalidShape("weight matrices do not match the config".into()));
        }
        let mut it = mats.into_iter();
        let embedding = it.next().unwrap();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                wq: it.next().unwrap(),
                wk: it.next().unwrap(),
                wv: it.next().unwrap(),
                wo: it.next().unwrap(),
                w_up: it.next().unwrap(),
                w_down: it.next().unwrap(),
            })
            .collect();
        let unembedding = it.next().unwrap();
        Ok(Self {
            config,
            embedding,
            layers,
            unembedding,
            path: AttentionPath::Grouped,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn attention_path(&self) -> AttentionPath {
        self.path
    }

    pub fn with_attention_path(mut self, path: AttentionPath) -> Result<Self> {
        if path == AttentionPath::PerHead && self.config.n_query_heads != self.config.n_kv_heads {
            return Err(Error::InvalidConfig(
                "per-head attention path requires n_kv_heads = n_query_heads".into(),
            ));
        }
        self.path = path;
        Ok(self)
    }

    /// All matrices in serialisation order.
    pub fn matrices(&self) -> Vec<&Matrix<T>> {
        let mut out = vec![&self.embedding];
        for layer in &self.layers {
            out.extend(layer.matrices());
        }
        out.push(&self.unembedding);
        out
    }

    /// SHA-256 of the exported weight file, hex encoded.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(export_weights(self));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// An empty cache shaped for this model.
    pub fn new_cache(&self, window: usize) -> KvCacheState<T> {
        KvCacheState::new(self.config.n_layers, self.config.n_kv_heads, window)
    }

    fn check_cache(&self, cache: &KvCacheState<T>) -> Result<()> {
        if cache.n_layers() != self.config.n_layers || cache.n_kv_heads() != self.config.n_kv_heads {
            return Err(Error::InvalidShape(format!(
                "cache is {}x{} but model is {}x{}",
                cache.n_layers(),
                cache.n_kv_heads(),
                self.config.n_layers,
                self.config.n_kv_heads
            )));
        }
        Ok(())
    }

    fn check_token(&self, token: u32) -> Result<()> {
        if token as usize >= self.config.vocab_size {
            return Err(Error::InvalidToken {
                token,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Runs one token through every layer, appending its K/V to the cache.
    fn forward_token(
        &self,
        token: u32,
        position: usize,
        cache: &mut KvCacheState<T>,
    ) -> Result<(Vec<T>, Vec<GroupAttention<T>>)> {
        let cfg = &self.config;
        let dh = cfg.head_dim;
        let group = cfg.group_size();
        let mut x = self.embedding.row(token as usize).to_vec();
        let mut attention = Vec::with_capacity(cfg.n_layers * cfg.n_kv_heads);

        for (l, layer) in self.layers.iter().enumerate() {
            let h = rms_norm(&x);
            let q = layer.wq.vec_mul(&h)?;
            let k = layer.wk.vec_mul(&h)?;
            let v = layer.wv.vec_mul(&h)?;
            for kv in 0..cfg.n_kv_heads {
                cache.append(
                    l,
                    kv,
                    KvEntry {
                        key: apply_rope(&k[kv * dh..(kv + 1) * dh], position)?,
                        value: v[kv * dh..(kv + 1) * dh].to_vec(),
                        position,
                        token,
                    },
                )?;
            }
            let queries = q
                .chunks_exact(dh)
                .map(|qh| apply_rope(qh, position))
                .collect::<Result<Vec<_>>>()?;

            let mut concat = Vec::with_capacity(cfg.d_model());
            match self.path {
                AttentionPath::Grouped => {
                    for kv in 0..cfg.n_kv_heads {
                        let store = cache.store(l, kv);
                        let (keys, vals) = (store.keys(), store.values());
                        let mut ga = GroupAttention::with_capacity(group);
                        for qh in &queries[kv * group..(kv + 1) * group] {
                            let (w, o) = scaled_dot_attention(qh, &keys, &vals)?;
                            concat.extend_from_slice(&o);
                            ga.push(qh.clone(), w, o);
                        }
                        attention.push(ga);
                    }
                }
                AttentionPath::PerHead => {
                    for (m, qh) in queries.iter().enumerate() {
                        let store = cache.store(l, m);
                        let (w, o) = scaled_dot_attention(qh, &store.keys(), &store.values())?;
                        concat.extend_from_slice(&o);
                        let mut ga = GroupAttention::with_capacity(1);
                        ga.push(qh.clone(), w, o);
                        attention.push(ga);
                    }
                }
            }

            for (xi, a) in x.iter_mut().zip(layer.wo.vec_mul(&concat)?) {
                *xi += a;
            }
            let h2 = rms_norm(&x);
            let up: Vec<T> = layer.w_up.vec_mul(&h2)?.into_iter().map(silu).collect();
            for (xi, d) in x.iter_mut().zip(layer.w_down.vec_mul(&up)?) {
                *xi += d;
            }
        }
        let logits = self.unembedding.vec_mul(&rms_norm(&x))?;
        Ok((logits, attention))
    }
}

/// Seeded uniform weights in `[-1, 1) / sqrt(d_model)`.
pub fn init_model<T: Scalar>(config: &ModelConfig) -> Result<DecoderWeights<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scale = 1.0 / (config.d_model() as f64).sqrt();
    let mats = weight_shapes(config)
        .into_iter()
        .map(|(r, c)| {
            let data = (0..r * c)
                .map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0) * scale))
                .collect();
            Matrix::from_vec(r, c, data)
        })
        .collect::<Result<Vec<_>>>()?;
    DecoderWeights::from_matrices(config.clone(), mats)
}

/// Processes the prompt into an empty cache.
///
/// The returned output describes the final prompt position; its
/// `prefill_window` carries the attention rows of the last `cache.window()`
/// prompt positions, oldest first.
pub fn prefill<T: Scalar>(
    weights: &DecoderWeights<T>,
    prompt: &[u32],
    cache: &mut KvCacheState<T>,
) -> Result<StepOutput<T>> {
    weights.check_cache(cache)?;
    if !cache.is_empty() {
        return Err(Error::CacheNotEmpty);
    }
    if prompt.is_empty() {
        return Err(Error::InvalidShape("empty prompt".into()));
    }
    for &t in prompt {
        weights.check_token(t)?;
    }
    let capture_from = prompt.len().saturating_sub(cache.window());
    let mut window: Vec<Vec<WindowRow<T>>> = vec![Vec::new(); cache.stores().len()];
    let mut last = None;
    for (pos, &token) in prompt.iter().enumerate() {
        let (logits, attention) = weights.forward_token(token, pos, cache)?;
        if pos >= capture_from {
            for (w, ga) in window.iter_mut().zip(&attention) {
                w.push(WindowRow {
                    producer: pos,
                    rows: ga.rows.clone(),
                });
            }
        }
        last = Some((token, pos, logits, attention));
    }
    let (token, position, logits, attention) = last.expect("prompt is non-empty");
    Ok(StepOutput {
        position,
        token,
        logits,
        attention,
        prefill_window: window,
    })
}

/// Appends one token and attends over the cache plus the new entry.
pub fn decode_step<T: Scalar>(
    weights: &DecoderWeights<T>,
    token: u32,
    cache: &mut KvCacheState<T>,
) -> Result<StepOutput<T>> {
    weights.check_cache(cache)?;
    weights.check_token(token)?;
    let mut last = None;
    for store in cache.stores() {
        let p = store.entries().last().ok_or(Error::EmptyCache)?.position;
        last = Some(last.map_or(p, |m: usize| m.max(p)));
    }
    let position = last.ok_or(Error::EmptyCache)? + 1;
    let (logits, attention) = weights.forward_token(token, position, cache)?;
    Ok(StepOutput {
        position,
        token,
        logits,
        attention,
        prefill_window: Vec::new(),
    })
}
