//! KV-cache state and the MorphKV selection engine.
//!
//! The cache is a flat list of per-(layer, kv-head) stores. Each store keeps
//! its entries ordered by absolute position together with the attention
//! profile window of the most recent producers. All structural mutation goes
//! through [`KvCacheState::append`] and [`KvCacheState::retain`], which keep
//! profile columns aligned index-for-index with the entry list.

mod config;
mod morphkv;
mod profile;
mod snapshot;

pub use config::{EvictionPolicyConfig, Fusion, PolicyKind};
pub use morphkv::{
    aggregate_group_scores, morphkv_step, morphkv_step_with, prefill_compress, record_prefill_profiles,
    select_retained, ScoreRouting,
};
pub use profile::{fuse, AttentionProfileWindow, AuxScoreVector, ProfileRow};
pub use snapshot::{CacheSnapshot, EntryRef, StoreSnapshot};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One cached token in one (layer, kv-head) store. Keys are stored post-RoPE.
#[derive(Debug, Clone, PartialEq)]
pub struct KvEntry<T> {
    pub key: Vec<T>,
    pub value: Vec<T>,
    pub position: usize,
    pub token: u32,
}

/// Entries and profile window for a single (layer, kv-head).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadStore<T> {
    entries: Vec<KvEntry<T>>,
    profile: AttentionProfileWindow<T>,
}

impl<T: Scalar> HeadStore<T> {
    fn new(window: usize) -> Self {
        Self {
            entries: Vec::new(),
            profile: AttentionProfileWindow::new(window),
        }
    }

    pub fn entries(&self) -> &[KvEntry<T>] {
        &self.entries
    }

    pub fn profile(&self) -> &AttentionProfileWindow<T> {
        &self.profile
    }

    pub fn occupancy(&self) -> usize {
        self.entries.len()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.position).collect()
    }

    pub fn keys(&self) -> Vec<&[T]> {
        self.entries.iter().map(|e| e.key.as_slice()).collect()
    }

    pub fn values(&self) -> Vec<&[T]> {
        self.entries.iter().map(|e| e.value.as_slice()).collect()
    }

    /// Records an aggregated attention row produced by the token at `producer`.
    pub fn record_profile(&mut self, aggregated: Vec<T>, producer: usize) -> Result<()> {
        self.profile.record(aggregated, producer, self.entries.len())
    }

    fn append(&mut self, entry: KvEntry<T>) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if entry.position <= last.position {
                return Err(Error::InternalInvariantViolation(format!(
                    "appending position {} after {}",
                    entry.position, last.position
                )));
            }
        }
        self.entries.push(entry);
        self.profile.push_zero_column();
        Ok(())
    }

    /// Keeps the entries at `keep` (ascending indices); returns evicted positions.
    fn retain(&mut self, keep: &[usize]) -> Result<Vec<usize>> {
        if keep.windows(2).any(|w| w[0] >= w[1]) || keep.last().is_some_and(|&i| i >= self.entries.len()) {
            return Err(Error::InternalInvariantViolation(format!(
                "retain indices {keep:?} invalid for occupancy {}",
                self.entries.len()
            )));
        }
        if keep.len() == self.entries.len() {
            return Ok(Vec::new());
        }
        let mut evicted = Vec::with_capacity(self.entries.len() - keep.len());
        let mut kept = Vec::with_capacity(keep.len());
        let mut next = keep.iter().peekable();
        for (i, entry) in std::mem::take(&mut self.entries).into_iter().enumerate() {
            if next.peek() == Some(&&i) {
                next.next();
                kept.push(entry);
            } else {
                evicted.push(entry.position);
            }
        }
        self.entries = kept;
        self.profile.retain_columns(keep);
        Ok(evicted)
    }

    /// Structural checks: ordered positions and aligned profile rows.
    pub fn check_alignment(&self) -> Result<(), String> {
        if self.entries.windows(2).any(|w| w[0].position >= w[1].position) {
            return Err("entry positions not strictly increasing".into());
        }
        self.profile.check(self.entries.len())
    }
}

/// The whole cache: `n_layers × n_kv_heads` stores, indexed
/// `layer * n_kv_heads + kv_head`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCacheState<T> {
    n_layers: usize,
    n_kv_heads: usize,
    window: usize,
    stores: Vec<HeadStore<T>>,
}

impl<T: Scalar> KvCacheState<T> {
    /// Empty cache whose profile windows hold up to `window` rows.
    pub fn new(n_layers: usize, n_kv_heads: usize, window: usize) -> Self {
        Self {
            n_layers,
            n_kv_heads,
            window,
            stores: (0..n_layers * n_kv_heads).map(|_| HeadStore::new(window)).collect(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn store_index(&self, layer: usize, kv_head: usize) -> usize {
        layer * self.n_kv_heads + kv_head
    }

    /// `(layer, kv_head)` of a flat store index.
    pub fn store_coords(&self, index: usize) -> (usize, usize) {
        (index / self.n_kv_heads, index % self.n_kv_heads)
    }

    pub fn store(&self, layer: usize, kv_head: usize) -> &HeadStore<T> {
        &self.stores[self.store_index(layer, kv_head)]
    }

    pub fn stores(&self) -> &[HeadStore<T>] {
        &self.stores
    }

    pub(crate) fn stores_mut(&mut self) -> &mut [HeadStore<T>] {
        &mut self.stores
    }

    pub fn is_empty(&self) -> bool {
        self.stores.iter().all(|s| s.entries.is_empty())
    }

    pub fn occupancy(&self, layer: usize, kv_head: usize) -> usize {
        self.store(layer, kv_head).occupancy()
    }

    pub fn occupancies(&self) -> Vec<usize> {
        self.stores.iter().map(HeadStore::occupancy).collect()
    }

    pub fn total_entries(&self) -> usize {
        self.stores.iter().map(HeadStore::occupancy).sum()
    }

    pub fn append(&mut self, layer: usize, kv_head: usize, entry: KvEntry<T>) -> Result<()> {
        let idx = self.store_index(layer, kv_head);
        self.stores[idx].append(entry)
    }

    /// Keeps only the entries at `keep` (ascending indices) in one store and
    /// prunes the matching profile columns. Returns the evicted positions.
    pub fn retain(&mut self, store: usize, keep: &[usize]) -> Result<Vec<usize>> {
        self.stores[store].retain(keep)
    }

    pub fn check_alignment(&self) -> Result<(), String> {
        for (i, store) in self.stores.iter().enumerate() {
            let (layer, head) = self.store_coords(i);
            store
                .check_alignment()
                .map_err(|e| format!("layer {layer} kv_head {head}: {e}"))?;
        }
        Ok(())
    }
}
