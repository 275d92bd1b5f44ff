//! Token-gated read-through block cache with per-block single flight.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::origin::Origin;
use super::ProxyError;
use crate::auth::{Audience, TokenKeys};
use crate::wire::MAX_FRAME;

pub const DEFAULT_BLOCK_SIZE: u64 = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub block_size: u64,
    /// Evict least-recently used blocks beyond this many cached bytes.
    pub max_cache_bytes: Option<u64>,
    /// Persist fetched blocks here and consult it before the origin.
    pub cache_dir: Option<PathBuf>,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            block_size: DEFAULT_BLOCK_SIZE,
            max_cache_bytes: None,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub origin_fetches: u64,
    pub cache_hits: u64,
    pub bytes_served: u64,
}

type BlockKey = (String, u64);
type Slot = Arc<OnceLock<Result<Arc<Vec<u8>>, ProxyError>>>;

#[derive(Default)]
struct Store {
    slots: HashMap<BlockKey, Slot>,
    last_use: HashMap<BlockKey, u64>,
    bytes: u64,
    tick: u64,
}

pub struct DataProxy {
    origin: Arc<dyn Origin>,
    keys: TokenKeys,
    cfg: ProxyConfig,
    store: Mutex<Store>,
    origin_fetches: AtomicU64,
    cache_hits: AtomicU64,
    bytes_served: AtomicU64,
}

impl std::fmt::Debug for DataProxy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DataProxy")
            .field("cfg", &self.cfg)
            .field("stats", &self.stats())
            .finish_non_exhaustive()
    }
}

impl DataProxy {
    pub fn new(origin: Arc<dyn Origin>, keys: TokenKeys, cfg: ProxyConfig) -> Self {
        Self {
            origin,
            keys,
            cfg: ProxyConfig {
                block_size: cfg.block_size.max(1),
                ..cfg
            },
            store: Mutex::new(Store::default()),
            origin_fetches: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
            bytes_served: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &ProxyConfig {
        &self.cfg
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            origin_fetches: self.origin_fetches.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            bytes_served: self.bytes_served.load(Ordering::SeqCst),
        }
    }

    pub fn cached_bytes(&self) -> u64 {
        self.store.lock().expect("cache lock").bytes
    }

    /// Returns bytes `[offset, offset + length)` of `path`, truncated at EOF.
    /// The token is checked before anything else.
    pub fn fetch(&self, path: &str, offset: u64, length: u64, token: &str, now: u64) -> Result<Vec<u8>, ProxyError> {
        self.keys
            .verify(token, Audience::Data, now)
            .map_err(|e| ProxyError::Denied(format!("data token rejected: {e}")))?;
        if length > MAX_FRAME as u64 {
            return Err(ProxyError::BadRequest("length over 16 MiB".into()));
        }
        let bs = self.cfg.block_size;
        let end = offset.saturating_add(length);
        let mut out = Vec::with_capacity(length as usize);
        let mut pos = offset;
        while pos < end {
            let idx = pos / bs;
            let block = self.block(path, idx)?;
            let in_block = (pos - idx * bs) as usize;
            if in_block >= block.len() {
                break;
            }
            let take = (block.len() - in_block).min((end - pos) as usize);
            out.extend_from_slice(&block[in_block..in_block + take]);
            pos += take as u64;
            if (block.len() as u64) < bs {
                break;
            }
        }
        self.bytes_served.fetch_add(out.len() as u64, Ordering::SeqCst);
        Ok(out)
    }

    fn block(&self, path: &str, idx: u64) -> Result<Arc<Vec<u8>>, ProxyError> {
        let key = (path.to_owned(), idx);
        let slot = {
            let mut store = self.store.lock().expect("cache lock");
            store.tick += 1;
            let tick = store.tick;
            store.last_use.insert(key.clone(), tick);
            store.slots.entry(key.clone()).or_default().clone()
        };
        let mut fetched = false;
        let result = slot
            .get_or_init(|| {
                fetched = true;
                self.load_block(path, idx)
            })
            .clone();
        if !fetched {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
        }
        match &result {
            Err(_) => {
                let mut store = self.store.lock().expect("cache lock");
                if store.slots.get(&key).is_some_and(|s| Arc::ptr_eq(s, &slot)) {
                    store.slots.remove(&key);
                    store.last_use.remove(&key);
                }
            }
            Ok(bytes) if fetched => self.account(&key, bytes.len() as u64),
            Ok(_) => {}
        }
        result
    }

    fn disk_path(&self, path: &str, idx: u64) -> Option<PathBuf> {
        let dir = self.cfg.cache_dir.as_ref()?;
        let digest = Sha256::digest(path.as_bytes());
        let name: String = digest.iter().take(16).map(|b| format!("{b:02x}")).collect();
        Some(dir.join(name).join(format!("{idx}.{}", self.cfg.block_size)))
    }

    fn load_block(&self, path: &str, idx: u64) -> Result<Arc<Vec<u8>>, ProxyError> {
        let disk = self.disk_path(path, idx);
        if let Some(bytes) = disk.as_ref().and_then(|p| fs::read(p).ok()) {
            return Ok(Arc::new(bytes));
        }
        self.origin_fetches.fetch_add(1, Ordering::SeqCst);
        let bs = self.cfg.block_size;
        let bytes = self.origin.fetch(path, idx * bs, bs)?;
        if let Some(p) = disk {
            let written = p
                .parent()
                .map_or(Ok(()), fs::create_dir_all)
                .and_then(|_| fs::write(&p, &bytes));
            if let Err(e) = written {
                tracing::warn!("cache dir write failed for {}: {e}", p.display());
            }
        }
        Ok(Arc::new(bytes))
    }

    fn account(&self, key: &BlockKey, len: u64) {
        let mut store = self.store.lock().expect("cache lock");
        store.bytes += len;
        let Some(cap) = self.cfg.max_cache_bytes else { return };
        while store.bytes > cap {
            let victim = store
                .last_use
                .iter()
                .filter(|(k, _)| *k != key)
                .min_by_key(|(_, t)| **t)
                .map(|(k, _)| k.clone());
            let Some(victim) = victim else { break };
            store.last_use.remove(&victim);
            if let Some(slot) = store.slots.remove(&victim) {
                if let Some(Ok(b)) = slot.get() {
                    store.bytes -= b.len() as u64;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proxy::DirOrigin;
    use std::sync::Barrier;

    fn setup(cfg: ProxyConfig) -> (tempfile::TempDir, DirOrigin, DataProxy, TokenKeys, Vec<u8>) {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<u8> = (0..300_000u32).map(|i| (i * 7 % 251) as u8).collect();
        fs::create_dir_all(dir.path().join("store/ds")).unwrap();
        fs::write(dir.path().join("store/ds/f.bin"), &data).unwrap();
        let origin = DirOrigin::new(dir.path());
        let keys = TokenKeys::generate();
        let proxy = DataProxy::new(Arc::new(origin.clone()), keys.clone(), cfg);
        (dir, origin, proxy, keys, data)
    }

    #[test]
    fn cold_then_warm() {
        let (_d, origin, proxy, keys, data) = setup(ProxyConfig::default());
        assert_eq!(proxy.stats(), CacheStats::default());
        let tok = keys.mint("alice", Audience::Data, 0, 100);
        let a = proxy.fetch("/store/ds/f.bin", 10, 1000, &tok, 1).unwrap();
        assert_eq!(a, data[10..1010]);
        let b = proxy.fetch("/store/ds/f.bin", 10, 1000, &tok, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            proxy.stats(),
            CacheStats {
                origin_fetches: 1,
                cache_hits: 1,
                bytes_served: 2000
            }
        );
        assert_eq!(origin.fetch_count(), 1);
    }

    #[test]
    fn truncation_and_errors() {
        let (_d, origin, proxy, keys, data) = setup(ProxyConfig::default());
        let tok = keys.mint("alice", Audience::Data, 0, 100);
        let tail = proxy.fetch("/store/ds/f.bin", 299_000, 5_000, &tok, 1).unwrap();
        assert_eq!(tail, data[299_000..]);
        assert!(proxy.fetch("/store/ds/f.bin", 400_000, 10, &tok, 1).unwrap().is_empty());
        assert!(matches!(
            proxy.fetch("/store/ds/none.bin", 0, 10, &tok, 1),
            Err(ProxyError::NotFound(_))
        ));
        let before = origin.fetch_count();
        let expired = keys.mint("alice", Audience::Data, 0, 1);
        assert!(matches!(
            proxy.fetch("/store/ds/f.bin", 0, 10, &expired, 5),
            Err(ProxyError::Denied(_))
        ));
        let batch = keys.mint("alice", Audience::Batch, 0, 100);
        assert!(proxy.fetch("/store/ds/f.bin", 0, 10, &batch, 5).is_err());
        assert_eq!(origin.fetch_count(), before);
    }

    #[test]
    fn single_flight_across_threads() {
        let (_d, origin, proxy, keys, _) = setup(ProxyConfig::default());
        let tok = keys.mint("alice", Audience::Data, 0, 100);
        let barrier = Barrier::new(20);
        std::thread::scope(|s| {
            for _ in 0..20 {
                s.spawn(|| {
                    barrier.wait();
                    proxy.fetch("/store/ds/f.bin", 70_000, 100, &tok, 1).unwrap();
                });
            }
        });
        assert_eq!(origin.fetch_count(), 1);
        assert_eq!(proxy.stats().origin_fetches, 1);
        assert_eq!(proxy.stats().cache_hits, 19);
    }

    #[test]
    fn lru_cap_and_disk_cache() {
        let cache = tempfile::tempdir().unwrap();
        let (_d, origin, proxy, keys, data) = setup(ProxyConfig {
            max_cache_bytes: Some(2 * DEFAULT_BLOCK_SIZE),
            cache_dir: Some(cache.path().to_path_buf()),
            ..ProxyConfig::default()
        });
        let tok = keys.mint("alice", Audience::Data, 0, 100);
        let all = proxy.fetch("/store/ds/f.bin", 0, 300_000, &tok, 1).unwrap();
        assert_eq!(all, data);
        assert!(proxy.cached_bytes() <= 2 * DEFAULT_BLOCK_SIZE);
        let fetched = origin.fetch_count();
        assert_eq!(fetched, 5);
        // Evicted blocks come back from the cache directory, not the origin.
        proxy.fetch("/store/ds/f.bin", 0, 300_000, &tok, 1).unwrap();
        assert_eq!(origin.fetch_count(), fetched);
    }
}
