//! Content-addressed, layer-granular store for KV and E caches.
//!
//! Entries are keyed by (context digest, model id, layer, kind). Contexts are
//! identified by the SHA-256 of their token ids encoded as little-endian `u32`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CacheKind, Error, Result};
use crate::model::{CacheSource, ECache, LayerKvCache, ModelConfig, PrefillOutput, RecomputeConfig, TokenSequence};

/// Name of the context hash, recorded in persisted artifacts.
pub const HASH_FN: &str = "sha256-u32le";

const SNAPSHOT_VERSION: u32 = 1;
const INDEX_FILE: &str = "index.json";

/// Digest of a token-id sequence.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContextId([u8; 32]);

impl ContextId {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Display for ContextId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for ContextId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContextId({self})")
    }
}

impl FromStr for ContextId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.len() != 64 || !s.is_ascii() {
            return Err(Error::parse("context id", format!("expected 64 hex digits, got {s:?}")));
        }
        let mut out = [0u8; 32];
        for (i, byte) in out.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|e| Error::parse("context id", format!("{s:?}: {e}")))?;
        }
        Ok(ContextId(out))
    }
}

pub fn context_hash(tokens: &TokenSequence) -> ContextId {
    let mut hasher = Sha256::new();
    for id in tokens.ids() {
        hasher.update(id.to_le_bytes());
    }
    ContextId(hasher.finalize().into())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey {
    pub context: ContextId,
    pub model: String,
    pub layer: usize,
    pub kind: CacheKind,
}

impl CacheKey {
    pub fn new(context: ContextId, model: impl Into<String>, layer: usize, kind: CacheKind) -> Self {
        CacheKey {
            context,
            model: model.into(),
            layer,
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CachePayload {
    Kv(LayerKvCache),
    E(ECache),
}

impl CachePayload {
    pub fn kind(&self) -> CacheKind {
        match self {
            CachePayload::Kv(_) => CacheKind::Kv,
            CachePayload::E(_) => CacheKind::E,
        }
    }

    pub fn byte_size(&self) -> usize {
        match self {
            CachePayload::Kv(kv) => kv.byte_size(),
            CachePayload::E(e) => e.byte_size(),
        }
    }

    pub fn positions(&self) -> usize {
        match self {
            CachePayload::Kv(kv) => kv.positions(),
            CachePayload::E(e) => e.positions(),
        }
    }
}

/// Which E layers a sender publishes alongside its KV cache.
#[derive(Debug, Clone, PartialEq)]
pub enum StorageMode {
    /// E at every layer, so any group can be evaluated offline.
    Profiling,
    /// E only at the transition layers of the active recompute config.
    Serving(RecomputeConfig),
}

impl StorageMode {
    pub fn e_layers(&self, n_layers: usize) -> Vec<usize> {
        match self {
            StorageMode::Profiling => (0..n_layers).collect(),
            StorageMode::Serving(config) => config.transition_layers(),
        }
    }
}

struct Entry {
    payload: Arc<CachePayload>,
    last_use: AtomicU64,
}

#[derive(Default)]
struct Inner {
    entries: HashMap<CacheKey, Entry>,
    models: HashMap<String, ModelConfig>,
    bytes: usize,
}

/// Thread-safe cache store with optional byte bound and
/// least-recently-fetched eviction.
#[derive(Default)]
pub struct KvStore {
    inner: RwLock<Inner>,
    clock: AtomicU64,
    capacity: Option<usize>,
}

impl fmt::Debug for KvStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KvStore")
            .field("entries", &self.len())
            .field("bytes", &self.total_bytes())
            .field("capacity", &self.capacity)
            .finish()
    }
}

impl KvStore {
    pub fn new() -> Self {
        KvStore::default()
    }

    pub fn bounded(capacity: usize) -> Self {
        KvStore {
            capacity: Some(capacity),
            ..KvStore::default()
        }
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    /// Declares a model's shape so later stores for it are shape-checked.
    pub fn register_model(&self, id: impl Into<String>, config: &ModelConfig) {
        self.inner.write().unwrap().models.insert(id.into(), config.clone());
    }

    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::Relaxed) + 1
    }

    fn check_shape(key: &CacheKey, payload: &CachePayload, model: Option<&ModelConfig>) -> Result<()> {
        if payload.kind() != key.kind {
            return Err(Error::ShapeMismatch(format!(
                "{} payload stored under a {} key",
                payload.kind(),
                key.kind
            )));
        }
        match payload {
            CachePayload::Kv(kv) => {
                let width = kv.n_kv_heads * kv.head_dim;
                if width == 0 || kv.keys.len() != kv.values.len() || kv.keys.len() % width != 0 {
                    return Err(Error::ShapeMismatch("ragged KV payload".into()));
                }
                if let Some(c) = model {
                    if kv.n_kv_heads != c.n_kv_heads || kv.head_dim != c.head_dim {
                        return Err(Error::ShapeMismatch(format!(
                            "KV payload {}x{} for model {} with {}x{}",
                            kv.n_kv_heads, kv.head_dim, key.model, c.n_kv_heads, c.head_dim
                        )));
                    }
                }
            }
            CachePayload::E(e) => {
                if e.d_model == 0 || e.hidden.len() % e.d_model != 0 || e.layer != key.layer {
                    return Err(Error::ShapeMismatch(format!(
                        "E payload for layer {} (width {}) stored at layer {}",
                        e.layer, e.d_model, key.layer
                    )));
                }
                if let Some(c) = model {
                    if e.d_model != c.d_model {
                        return Err(Error::ShapeMismatch(format!(
                            "E payload width {} for model {} with d_model {}",
                            e.d_model, key.model, c.d_model
                        )));
                    }
                }
            }
        }
        if let Some(c) = model {
            if key.layer >= c.n_layers {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} out of range for model {} with {} layers",
                    key.layer, key.model, c.n_layers
                )));
            }
        }
        Ok(())
    }

    /// Stores `payload` under `key` and returns its byte size.
    pub fn store(&self, key: CacheKey, payload: CachePayload) -> Result<usize> {
        let bytes = payload.byte_size();
        let mut inner = self.inner.write().unwrap();
        Self::check_shape(&key, &payload, inner.models.get(&key.model))?;
        if let Some(existing) = inner.entries.get(&key) {
            if *existing.payload == payload {
                return Ok(bytes);
            }
        }
        if let Some(capacity) = self.capacity {
            if bytes > capacity {
                return Err(Error::EvictionRefused { bytes, capacity });
            }
        }
        if let Some(old) = inner.entries.remove(&key) {
            inner.bytes -= old.payload.byte_size();
        }
        if let Some(capacity) = self.capacity {
            while inner.bytes + bytes > capacity {
                let victim = inner
                    .entries
                    .iter()
                    .min_by_key(|(k, e)| (e.last_use.load(Ordering::Relaxed), (*k).clone()))
                    .map(|(k, _)| k.clone())
                    .expect("non-empty store while over capacity");
                let evicted = inner.entries.remove(&victim).unwrap();
                inner.bytes -= evicted.payload.byte_size();
            }
        }
        inner.bytes += bytes;
        let stamp = self.tick();
        inner.entries.insert(
            key,
            Entry {
                payload: Arc::new(payload),
                last_use: AtomicU64::new(stamp),
            },
        );
        Ok(bytes)
    }

    pub fn fetch(&self, key: &CacheKey) -> Option<Arc<CachePayload>> {
        let inner = self.inner.read().unwrap();
        let entry = inner.entries.get(key)?;
        entry.last_use.store(self.tick(), Ordering::Relaxed);
        Some(Arc::clone(&entry.payload))
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.inner.read().unwrap().entries.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.inner.read().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_bytes(&self) -> usize {
        self.inner.read().unwrap().bytes
    }

    /// All keys, sorted.
    pub fn keys(&self) -> Vec<CacheKey> {
        let mut keys: Vec<CacheKey> = self.inner.read().unwrap().entries.keys().cloned().collect();
        keys.sort();
        keys
    }

    /// Publishes a sender prefill over the reuse window (every position but the
    /// last): KV at every layer plus the E layers `mode` selects.
    pub fn store_prefill(
        &self,
        tokens: &TokenSequence,
        model: &str,
        prefill: &PrefillOutput,
        mode: &StorageMode,
    ) -> Result<usize> {
        let context = context_hash(tokens);
        let window = tokens.len().saturating_sub(1);
        let mut total = 0;
        for (layer, kv) in prefill.kv.layers.iter().enumerate() {
            total += self.store(
                CacheKey::new(context, model, layer, CacheKind::Kv),
                CachePayload::Kv(kv.prefix(window)?),
            )?;
        }
        for layer in mode.e_layers(prefill.kv.n_layers()) {
            let e = prefill.e.get(layer).ok_or(Error::CacheMiss {
                layer,
                kind: CacheKind::E,
            })?;
            total += self.store(
                CacheKey::new(context, model, layer, CacheKind::E),
                CachePayload::E(e.clone()),
            )?;
        }
        Ok(total)
    }

    /// View of one sender's caches for one context, usable by partial prefill.
    pub fn source<'a>(&'a self, tokens: &TokenSequence, model: &'a str) -> StoreSource<'a> {
        StoreSource {
            store: self,
            context: context_hash(tokens),
            model,
        }
    }

    /// Writes every entry as a little-endian f32 blob plus `index.json`.
    pub fn save_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("blobs"))?;
        let inner = self.inner.read().unwrap();
        let mut keys: Vec<&CacheKey> = inner.entries.keys().collect();
        keys.sort();
        let mut index = SnapshotIndex {
            version: SNAPSHOT_VERSION,
            hash_fn: HASH_FN.to_string(),
            entries: Vec::with_capacity(keys.len()),
        };
        for (i, key) in keys.into_iter().enumerate() {
            let payload = &inner.entries[key].payload;
            let path = format!("blobs/{i:06}.bin");
            let (floats, shape) = match payload.as_ref() {
                CachePayload::Kv(kv) => (
                    kv.to_head_major(),
                    BlobShape::Kv {
                        n_kv_heads: kv.n_kv_heads,
                        positions: kv.positions(),
                        head_dim: kv.head_dim,
                    },
                ),
                CachePayload::E(e) => (
                    e.hidden.clone(),
                    BlobShape::E {
                        positions: e.positions(),
                        d_model: e.d_model,
                    },
                ),
            };
            let bytes: Vec<u8> = floats.iter().flat_map(|f| f.to_le_bytes()).collect();
            fs::write(dir.join(&path), &bytes)?;
            index.entries.push(SnapshotEntry {
                context: key.context.to_string(),
                model: key.model.clone(),
                layer: key.layer,
                kind: key.kind,
                path,
                bytes: bytes.len(),
                shape,
            });
        }
        let json = serde_json::to_string_pretty(&index).map_err(|e| Error::parse(INDEX_FILE, e.to_string()))?;
        fs::write(dir.join(INDEX_FILE), json + "\n")?;
        Ok(())
    }

    /// Loads a snapshot written by [`KvStore::save_snapshot`] into an unbounded store.
    pub fn load_snapshot(dir: &Path) -> Result<Self> {
        let origin = dir.join(INDEX_FILE).display().to_string();
        let text = fs::read_to_string(dir.join(INDEX_FILE))?;
        let index: SnapshotIndex = serde_json::from_str(&text).map_err(|e| Error::parse(&origin, e.to_string()))?;
        if index.version != SNAPSHOT_VERSION {
            return Err(Error::parse(
                &origin,
                format!("unsupported snapshot version {}", index.version),
            ));
        }
        if index.hash_fn != HASH_FN {
            return Err(Error::parse(
                &origin,
                format!("unsupported hash function {:?}", index.hash_fn),
            ));
        }
        let store = KvStore::new();
        for (i, entry) in index.entries.into_iter().enumerate() {
            let raw = fs::read(dir.join(&entry.path))?;
            if raw.len() != entry.bytes || raw.len() % 4 != 0 {
                return Err(Error::parse(
                    &origin,
                    format!(
                        "entries[{i}]: blob {} has {} bytes, index says {}",
                        entry.path,
                        raw.len(),
                        entry.bytes
                    ),
                ));
            }
            let floats: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let payload = match entry.shape {
                BlobShape::Kv {
                    n_kv_heads,
                    positions,
                    head_dim,
                } => CachePayload::Kv(LayerKvCache::from_head_major(n_kv_heads, head_dim, positions, &floats)?),
                BlobShape::E { positions, d_model } => {
                    if floats.len() != positions * d_model {
                        return Err(Error::parse(&origin, format!("entries[{i}]: E blob shape mismatch")));
                    }
                    CachePayload::E(ECache {
                        layer: entry.layer,
                        d_model,
                        hidden: floats,
                    })
                }
            };
            let context: ContextId = entry.context.parse()?;
            store.store(CacheKey::new(context, entry.model, entry.layer, entry.kind), payload)?;
        }
        Ok(store)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotIndex {
    version: u32,
    hash_fn: String,
    entries: Vec<SnapshotEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotEntry {
    context: String,
    model: String,
    layer: usize,
    kind: CacheKind,
    path: String,
    bytes: usize,
    shape: BlobShape,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum BlobShape {
    Kv {
        n_kv_heads: usize,
        positions: usize,
        head_dim: usize,
    },
    E {
        positions: usize,
        d_model: usize,
    },
}

/// [`CacheSource`] backed by store fetches for one (context, sender model).
pub struct StoreSource<'a> {
    store: &'a KvStore,
    context: ContextId,
    model: &'a str,
}

impl StoreSource<'_> {
    fn fetch(&self, layer: usize, kind: CacheKind) -> Option<Arc<CachePayload>> {
        self.store.fetch(&CacheKey::new(self.context, self.model, layer, kind))
    }
}

impl CacheSource for StoreSource<'_> {
    fn kv_layer(&self, layer: usize) -> Option<std::borrow::Cow<'_, LayerKvCache>> {
        match self.fetch(layer, CacheKind::Kv)?.as_ref() {
            CachePayload::Kv(kv) => Some(std::borrow::Cow::Owned(kv.clone())),
            CachePayload::E(_) => None,
        }
    }

    fn e_layer(&self, layer: usize) -> Option<std::borrow::Cow<'_, ECache>> {
        match self.fetch(layer, CacheKind::E)?.as_ref() {
            CachePayload::E(e) => Some(std::borrow::Cow::Owned(e.clone())),
            CachePayload::Kv(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, full_prefill, partial_prefill, ModelConfig};
    use rand::{Rng, SeedableRng};

    fn kv_payload(positions: usize, kv_heads: usize, head_dim: usize, fill: f32) -> CachePayload {
        let mut kv = LayerKvCache::empty(kv_heads, head_dim);
        let w = kv_heads * head_dim;
        for p in 0..positions {
            let row: Vec<f32> = (0..w).map(|i| fill + (p * w + i) as f32).collect();
            kv.set(p, &row, &row);
        }
        CachePayload::Kv(kv)
    }

    fn key(layer: usize, kind: CacheKind) -> CacheKey {
        CacheKey::new(context_hash(&TokenSequence(vec![1, 2, 3])), "m", layer, kind)
    }

    #[test]
    fn round_trip_and_size() {
        let store = KvStore::new();
        let payload = kv_payload(100, 1, 16, 0.5);
        assert_eq!(store.store(key(0, CacheKind::Kv), payload.clone()).unwrap(), 12800);
        assert_eq!(*store.fetch(&key(0, CacheKind::Kv)).unwrap(), payload);
        assert!(store.fetch(&key(1, CacheKind::Kv)).is_none());
        assert!(store.fetch(&key(0, CacheKind::E)).is_none());
    }

    #[test]
    fn idempotent_store() {
        let store = KvStore::new();
        let payload = kv_payload(10, 2, 4, 0.0);
        let a = store.store(key(0, CacheKind::Kv), payload.clone()).unwrap();
        let total = store.total_bytes();
        let b = store.store(key(0, CacheKind::Kv), payload).unwrap();
        assert_eq!(a, b);
        assert_eq!(store.total_bytes(), total);
        assert_eq!(store.len(), 1);
        // replacing with different content updates accounting
        store.store(key(0, CacheKind::Kv), kv_payload(5, 2, 4, 0.0)).unwrap();
        assert_eq!(store.total_bytes(), 5 * 2 * 2 * 4 * 4);
    }

    #[test]
    fn shape_checks() {
        let store = KvStore::new();
        assert!(matches!(
            store.store(key(0, CacheKind::E), kv_payload(2, 1, 4, 0.0)),
            Err(Error::ShapeMismatch(_))
        ));
        store.register_model("m", &ModelConfig::default());
        assert!(store.store(key(0, CacheKind::Kv), kv_payload(2, 2, 4, 0.0)).is_err());
        assert!(store.store(key(8, CacheKind::Kv), kv_payload(2, 1, 16, 0.0)).is_err());
        let e = ECache {
            layer: 3,
            d_model: 64,
            hidden: vec![0.0; 128],
        };
        assert!(store.store(key(2, CacheKind::E), CachePayload::E(e.clone())).is_err());
        assert_eq!(store.store(key(3, CacheKind::E), CachePayload::E(e)).unwrap(), 512);
    }

    #[test]
    fn bounded_store_evicts_least_recently_fetched() {
        let one = kv_payload(1, 1, 4, 0.0).byte_size();
        let store = KvStore::bounded(3 * one);
        for l in 0..3 {
            store
                .store(key(l, CacheKind::Kv), kv_payload(1, 1, 4, l as f32))
                .unwrap();
        }
        store.fetch(&key(0, CacheKind::Kv)).unwrap();
        store.store(key(3, CacheKind::Kv), kv_payload(1, 1, 4, 3.0)).unwrap();
        assert!(store.contains(&key(0, CacheKind::Kv)));
        assert!(!store.contains(&key(1, CacheKind::Kv)));
        assert_eq!(store.total_bytes(), 3 * one);
        assert!(matches!(
            store.store(key(4, CacheKind::Kv), kv_payload(4, 1, 4, 0.0)),
            Err(Error::EvictionRefused { .. })
        ));
    }

    #[test]
    fn hash_properties() {
        let a = TokenSequence(vec![5, 6, 7]);
        assert_eq!(context_hash(&a), context_hash(&a.clone()));
        assert_ne!(
            context_hash(&TokenSequence(vec![])),
            context_hash(&TokenSequence(vec![0]))
        );
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let base: Vec<u32> = (0..rng.gen_range(1..40)).map(|_| rng.gen_range(0..128)).collect();
            let mut mutated = base.clone();
            let i = rng.gen_range(0..base.len());
            mutated[i] = (mutated[i] + rng.gen_range(1..128)) % 128;
            assert_ne!(
                context_hash(&TokenSequence(base)),
                context_hash(&TokenSequence(mutated))
            );
        }
        let id = context_hash(&a);
        assert_eq!(id.to_string().parse::<ContextId>().unwrap(), id);
    }

    #[test]
    fn hash_is_stable_across_runs() {
        // SHA-256 of the bytes 01 00 00 00 02 00 00 00
        let id = context_hash(&TokenSequence(vec![1, 2]));
        let expected = {
            let mut h = Sha256::new();
            h.update([1u8, 0, 0, 0, 2, 0, 0, 0]);
            let out: [u8; 32] = h.finalize().into();
            out
        };
        assert_eq!(id.as_bytes(), &expected);
    }

    #[test]
    fn serving_mode_stores_only_transition_e() {
        let config = ModelConfig::default();
        let model = build_model(&config, None).unwrap();
        let tokens = TokenSequence((0..20).collect());
        let prefill = full_prefill(&model, &tokens).unwrap();
        let store = KvStore::new();
        let active = RecomputeConfig::from_ranges([(0, 1), (4, 5)]).unwrap();
        store
            .store_prefill(&tokens, model.id(), &prefill, &StorageMode::Serving(active.clone()))
            .unwrap();
        let e_layers: Vec<usize> = store
            .keys()
            .into_iter()
            .filter(|k| k.kind == CacheKind::E)
            .map(|k| k.layer)
            .collect();
        assert_eq!(e_layers, vec![4]);
        let ctx = context_hash(&tokens);
        for l in (0..8).filter(|&l| l != 4) {
            assert!(store.fetch(&CacheKey::new(ctx, model.id(), l, CacheKind::E)).is_none());
        }
        // and the stored caches are sufficient for the active config
        let source = store.source(&tokens, model.id());
        let mixed = partial_prefill(&model, &tokens, &active, &source).unwrap();
        assert_eq!(mixed.logits, prefill.logits);
        // but not for a config needing another transition
        let other = RecomputeConfig::single(2, 3).unwrap();
        assert!(matches!(
            partial_prefill(&model, &tokens, &other, &source),
            Err(Error::CacheMiss {
                layer: 2,
                kind: CacheKind::E
            })
        ));
    }

    #[test]
    fn profiling_mode_accounting() {
        let config = ModelConfig::default();
        let model = build_model(&config, None).unwrap();
        let tokens = TokenSequence((0..11).collect());
        let prefill = full_prefill(&model, &tokens).unwrap();
        let store = KvStore::new();
        let total = store
            .store_prefill(&tokens, model.id(), &prefill, &StorageMode::Profiling)
            .unwrap();
        let expected = 8 * 10 * (config.kv_bytes_per_position() + config.e_bytes_per_position());
        assert_eq!(total, expected);
        assert_eq!(store.total_bytes(), expected);
        assert_eq!(store.len(), 16);
    }

    #[test]
    fn snapshot_round_trip() {
        let config = ModelConfig::default();
        let model = build_model(&config, None).unwrap();
        let tokens = TokenSequence((3..15).collect());
        let prefill = full_prefill(&model, &tokens).unwrap();
        let store = KvStore::new();
        store
            .store_prefill(&tokens, model.id(), &prefill, &StorageMode::Profiling)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        store.save_snapshot(dir.path()).unwrap();
        let loaded = KvStore::load_snapshot(dir.path()).unwrap();
        assert_eq!(loaded.keys(), store.keys());
        for k in store.keys() {
            assert_eq!(loaded.fetch(&k).unwrap(), store.fetch(&k).unwrap());
        }
        // blob layout: first KV blob starts with head-major keys of layer 0
        let raw = std::fs::read(dir.path().join("blobs/000000.bin")).unwrap();
        assert_eq!(raw.len(), 11 * config.kv_bytes_per_position());

        let index = dir.path().join("index.json");
        let text = std::fs::read_to_string(&index)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 7");
        std::fs::write(&index, text).unwrap();
        assert!(matches!(KvStore::load_snapshot(dir.path()), Err(Error::Parse { .. })));
    }

    #[test]
    fn concurrent_store_and_fetch() {
        let store = Arc::new(KvStore::new());
        let payload = kv_payload(8, 1, 16, 1.0);
        std::thread::scope(|s| {
            for t in 0..4 {
                let store = Arc::clone(&store);
                let payload = payload.clone();
                s.spawn(move || {
                    for l in 0..16 {
                        store.store(key(l, CacheKind::Kv), payload.clone()).unwrap();
                        if let Some(got) = store.fetch(&key((l + t) % 16, CacheKind::Kv)) {
                            assert_eq!(*got, payload);
                        }
                    }
                });
            }
        });
        assert_eq!(store.len(), 16);
        assert_eq!(store.total_bytes(), 16 * payload.byte_size());
    }
}
