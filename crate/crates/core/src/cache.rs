//! LRU cache of activated submodels with single-flight loading.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Submodel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    /// Maximum resident submodels.
    pub capacity: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig { capacity: 8 }
    }
}

/// Power-of-two microsecond buckets: bucket `i` counts samples in
/// `[2^(i-1), 2^i)`, bucket 0 counts zero.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub buckets: Vec<u64>,
    pub count: u64,
    pub sum_micros: u64,
    pub max_micros: u64,
}

impl Histogram {
    pub fn record(&mut self, micros: u64) {
        let i = (u64::BITS - micros.leading_zeros()) as usize;
        if self.buckets.len() <= i {
            self.buckets.resize(i + 1, 0);
        }
        self.buckets[i] += 1;
        self.count += 1;
        self.sum_micros += micros;
        self.max_micros = self.max_micros.max(micros);
    }

    pub fn mean_micros(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum_micros as f64 / self.count as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub capacity: usize,
    pub resident: usize,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    /// Misses that waited on another request's in-flight load.
    pub coalesced: u64,
    pub cold_load_micros: Histogram,
}

impl CacheStats {
    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

/// How a lookup was satisfied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lookup {
    pub cache_hit: bool,
    /// Time spent loading or waiting for a load; 0 on a hit.
    pub load_micros: u64,
}

#[derive(Default)]
struct Inner {
    entries: HashMap<u64, (Arc<Submodel>, u64)>,
    recency: BTreeMap<u64, u64>,
    tick: u64,
    loading: HashSet<u64>,
    stats: CacheStats,
}

impl Inner {
    fn touch(&mut self, id: u64) {
        self.tick += 1;
        let t = self.tick;
        if let Some((_, old)) = self.entries.get_mut(&id) {
            self.recency.remove(old);
            *old = t;
            self.recency.insert(t, id);
        }
    }

    fn insert(&mut self, id: u64, sub: Arc<Submodel>, capacity: usize) {
        self.tick += 1;
        let t = self.tick;
        if let Some((_, old)) = self.entries.insert(id, (sub, t)) {
            self.recency.remove(&old);
        }
        self.recency.insert(t, id);
        while self.entries.len() > capacity {
            let (_, victim) = self.recency.pop_first().expect("recency tracks every entry");
            self.entries.remove(&victim);
            self.stats.evictions += 1;
        }
    }
}

pub struct SubmodelCache {
    capacity: usize,
    inner: Mutex<Inner>,
    loaded: Condvar,
}

impl SubmodelCache {
    pub fn new(cfg: CacheConfig) -> Result<Self> {
        if cfg.capacity == 0 {
            return Err(Error::pre("cache capacity must be >= 1"));
        }
        Ok(SubmodelCache {
            capacity: cfg.capacity,
            inner: Mutex::new(Inner::default()),
            loaded: Condvar::new(),
        })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Returns the resident submodel for `id`, or runs `load` to fetch it.
    /// Concurrent misses on one id run `load` once; the others wait. A
    /// failed load wakes the waiters, which then retry for themselves.
    pub fn get_or_load<F>(&self, id: u64, load: F) -> Result<(Arc<Submodel>, Lookup)>
    where
        F: Fn() -> Result<Submodel>,
    {
        let start = Instant::now();
        let mut g = self.lock();
        let mut waited = false;
        loop {
            if let Some((sub, _)) = g.entries.get(&id) {
                let sub = sub.clone();
                g.touch(id);
                let lookup = if waited {
                    g.stats.misses += 1;
                    g.stats.coalesced += 1;
                    Lookup {
                        cache_hit: false,
                        load_micros: start.elapsed().as_micros() as u64,
                    }
                } else {
                    g.stats.hits += 1;
                    Lookup {
                        cache_hit: true,
                        load_micros: 0,
                    }
                };
                return Ok((sub, lookup));
            }
            if !g.loading.contains(&id) {
                break;
            }
            waited = true;
            g = self.loaded.wait(g).unwrap_or_else(|p| p.into_inner());
        }
        g.loading.insert(id);
        drop(g);

        let t0 = Instant::now();
        let result = load();
        let micros = t0.elapsed().as_micros() as u64;

        let mut g = self.lock();
        g.loading.remove(&id);
        let out = match result {
            Ok(sub) => {
                let sub = Arc::new(sub);
                g.insert(id, sub.clone(), self.capacity);
                g.stats.misses += 1;
                g.stats.cold_load_micros.record(micros);
                Ok((
                    sub,
                    Lookup {
                        cache_hit: false,
                        load_micros: start.elapsed().as_micros() as u64,
                    },
                ))
            }
            Err(e) => Err(e),
        };
        drop(g);
        self.loaded.notify_all();
        out
    }

    /// Drops `id` if resident; returns whether it was.
    pub fn evict(&self, id: u64) -> bool {
        let mut g = self.lock();
        match g.entries.remove(&id) {
            Some((_, t)) => {
                g.recency.remove(&t);
                g.stats.evictions += 1;
                true
            }
            None => false,
        }
    }

    pub fn contains(&self, id: u64) -> bool {
        self.lock().entries.contains_key(&id)
    }

    /// Resident ids, least recently used first.
    pub fn resident(&self) -> Vec<u64> {
        self.lock().recency.values().copied().collect()
    }

    pub fn stats(&self) -> CacheStats {
        let g = self.lock();
        CacheStats {
            capacity: self.capacity,
            resident: g.entries.len(),
            ..g.stats.clone()
        }
    }
}
