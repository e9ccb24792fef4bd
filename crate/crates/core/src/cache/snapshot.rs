use serde::{Deserialize, Serialize};

use super::config::Fusion;
use super::profile::fuse;
use super::KvCacheState;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryRef {
    pub position: usize,
    pub token: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreSnapshot {
    pub layer: usize,
    pub kv_head: usize,
    pub entries: Vec<EntryRef>,
    /// Fused scores over the distant entries; empty while the window is empty.
    pub fused_scores: Vec<f64>,
}

/// JSON-serialisable view of what every store currently retains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheSnapshot {
    pub step: usize,
    pub fusion: Fusion,
    pub stores: Vec<StoreSnapshot>,
}

impl CacheSnapshot {
    pub fn capture<T: Scalar>(cache: &KvCacheState<T>, step: usize, fusion: Fusion) -> Self {
        let stores = cache
            .stores()
            .iter()
            .enumerate()
            .map(|(i, store)| {
                let (layer, kv_head) = cache.store_coords(i);
                StoreSnapshot {
                    layer,
                    kv_head,
                    entries: store
                        .entries()
                        .iter()
                        .map(|e| EntryRef {
                            position: e.position,
                            token: e.token,
                        })
                        .collect(),
                    fused_scores: fuse(store.profile(), fusion)
                        .map(|f| f.0.into_iter().map(Scalar::to_f64_lossy).collect())
                        .unwrap_or_default(),
                }
            })
            .collect();
        Self { step, fusion, stores }
    }

    pub fn positions(&self, layer: usize, kv_head: usize) -> Option<Vec<usize>> {
        self.stores
            .iter()
            .find(|s| s.layer == layer && s.kv_head == kv_head)
            .map(|s| s.entries.iter().map(|e| e.position).collect())
    }
}
