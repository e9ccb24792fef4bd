//! Scripted replay of the sun / me / today's example with C=2, R=2.

use morphkv::model::{GroupAttention, StepOutput, WindowRow};
use morphkv::{CacheSnapshot, EvictionPolicyConfig, Fusion, KvCache, KvEntry, PolicyEngine};

pub const WORDS: [&str; 7] = ["sun", "me", "today's", "out", "The", "perfect", "bright"];

/// Rows of the three decode steps, over the entries live at each step.
pub const DECODE_ROWS: [&[f64]; 3] = [
    &[0.2, 0.05, 0.3, 0.2, 0.25],
    &[0.3, 0.2, 0.02, 0.3, 0.18],
    &[0.35, 0.05, 0.1, 0.3, 0.2],
];

fn entry(position: usize) -> KvEntry<f64> {
    KvEntry {
        key: vec![position as f64, 1.0],
        value: vec![1.0, position as f64],
        position,
        token: position as u32,
    }
}

pub fn words(cache: &KvCache) -> Vec<&'static str> {
    cache.store(0, 0).positions().into_iter().map(|p| WORDS[p]).collect()
}

/// Appends position `4 + k` and runs decode step `k + 1` with `DECODE_ROWS[k]`.
pub fn decode(engine: &mut PolicyEngine<f64>, cache: &mut KvCache, k: usize) -> Vec<&'static str> {
    let position = 4 + k;
    cache.append(0, 0, entry(position)).unwrap();
    let out = StepOutput::scripted(position, vec![GroupAttention::from_rows(vec![DECODE_ROWS[k].to_vec()])]);
    let log = engine.on_decode(cache, &out, k + 1).unwrap();
    log[0].iter().map(|&p| WORDS[p]).collect()
}

/// Four prompt entries with the last two prompt rows recorded.
pub fn primed(capacity: usize, fusion: Fusion) -> (PolicyEngine<f64>, KvCache) {
    let cfg = EvictionPolicyConfig::morphkv(capacity, 2).with_fusion(fusion);
    let mut engine = PolicyEngine::new(cfg, 1).unwrap();
    let mut cache = KvCache::new(1, 1, 2);
    for p in 0..4 {
        cache.append(0, 0, entry(p)).unwrap();
    }
    let window = vec![vec![
        WindowRow {
            producer: 2,
            rows: vec![vec![0.4, 0.3, 0.3]],
        },
        WindowRow {
            producer: 3,
            rows: vec![vec![0.2, 0.05, 0.3, 0.45]],
        },
    ]];
    let prefill = StepOutput::scripted(3, vec![GroupAttention::from_rows(vec![vec![0.2, 0.05, 0.3, 0.45]])])
        .with_prefill_window(window);
    let log = engine.on_prefill(&mut cache, &prefill).unwrap();
    assert!(log[0].is_empty());
    (engine, cache)
}

/// Evicted words per step and the cache after each step, under C=2 sum fusion.
pub fn replay() -> Vec<(Vec<&'static str>, Vec<&'static str>)> {
    let (mut engine, mut cache) = primed(2, Fusion::Sum);
    (0..3)
        .map(|k| {
            let evicted = decode(&mut engine, &mut cache, k);
            (evicted, words(&cache))
        })
        .collect()
}

/// Fused scores over `[sun, me, today's]` at the first decode step, taken
/// with room to spare so nothing is evicted first.
pub fn first_step_scores(fusion: Fusion) -> Vec<f64> {
    let (mut engine, mut cache) = primed(3, fusion);
    assert!(decode(&mut engine, &mut cache, 0).is_empty());
    CacheSnapshot::capture(&cache, 1, fusion).stores[0].fused_scores.clone()
}
