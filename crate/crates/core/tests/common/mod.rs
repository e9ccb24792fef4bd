#![allow(dead_code)]

pub mod walkthrough;

use morphkv::model::{DecoderWeights, ModelConfig};
use morphkv::tensor::Matrix;

/// Whole-sequence forward pass with no cache, written with plain loops.
pub struct Reference {
    /// `[position][vocab]`
    pub logits: Vec<Vec<f64>>,
    /// `[layer][query_head][query_pos][key_pos]`, causal (zero above the diagonal).
    pub attention: Vec<Vec<Vec<Vec<f64>>>>,
}

fn times(x: &[f64], w: &Matrix<f64>) -> Vec<f64> {
    let (rows, cols) = w.shape();
    assert_eq!(x.len(), rows);
    (0..cols).map(|c| (0..rows).map(|r| x[r] * w.get(r, c)).sum()).collect()
}

fn normalise(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / (ms + 1e-6).sqrt();
    x.iter().map(|v| v * s).collect()
}

fn rotate(v: &[f64], pos: usize) -> Vec<f64> {
    let d = v.len();
    let mut out = v.to_vec();
    for i in 0..d / 2 {
        let theta = pos as f64 / 10_000f64.powf(2.0 * i as f64 / d as f64);
        let (s, c) = theta.sin_cos();
        out[2 * i] = v[2 * i] * c - v[2 * i + 1] * s;
        out[2 * i + 1] = v[2 * i] * s + v[2 * i + 1] * c;
    }
    out
}

pub fn reference_forward(w: &DecoderWeights<f64>, tokens: &[u32]) -> Reference {
    let cfg: &ModelConfig = w.config();
    let (dh, m, kvh) = (cfg.head_dim, cfg.n_query_heads, cfg.n_kv_heads);
    let group = m / kvh;
    let n = tokens.len();
    let mut xs: Vec<Vec<f64>> = tokens.iter().map(|&t| w.embedding.row(t as usize).to_vec()).collect();
    let mut attention = Vec::new();
    for layer in &w.layers {
        let hs: Vec<Vec<f64>> = xs.iter().map(|x| normalise(x)).collect();
        let q: Vec<Vec<f64>> = hs.iter().map(|h| times(h, &layer.wq)).collect();
        let k: Vec<Vec<f64>> = hs.iter().map(|h| times(h, &layer.wk)).collect();
        let v: Vec<Vec<f64>> = hs.iter().map(|h| times(h, &layer.wv)).collect();
        let mut layer_att = vec![vec![vec![0.0; n]; n]; m];
        let mut concat = vec![vec![0.0; m * dh]; n];
        for head in 0..m {
            let kv = head / group;
            for i in 0..n {
                let qi = rotate(&q[i][head * dh..(head + 1) * dh], i);
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let kj = rotate(&k[j][kv * dh..(kv + 1) * dh], j);
                        qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..=i {
                    let a = e[j] / z;
                    layer_att[head][i][j] = a;
                    for d in 0..dh {
                        concat[i][head * dh + d] += a * v[j][kv * dh + d];
                    }
                }
            }
        }
        for i in 0..n {
            let o = times(&concat[i], &layer.wo);
            for (x, y) in xs[i].iter_mut().zip(o) {
                *x += y;
            }
            let h2 = normalise(&xs[i]);
            let up: Vec<f64> = times(&h2, &layer.w_up)
                .into_iter()
                .map(|u| u / (1.0 + (-u).exp()))
                .collect();
            for (x, y) in xs[i].iter_mut().zip(times(&up, &layer.w_down)) {
                *x += y;
            }
        }
        attention.push(layer_att);
    }
    let logits = xs.iter().map(|x| times(&normalise(x), &w.unembedding)).collect();
    Reference { logits, attention }
}

pub fn tiny_model(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_query_heads: 1,
        n_kv_heads: 1,
        head_dim: 8,
        vocab_size: 256,
        seed,
    }
}

pub fn small_model(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_query_heads: 4,
        n_kv_heads: 2,
        head_dim: 8,
        vocab_size: 64,
        seed,
    }
}
