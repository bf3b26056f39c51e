//! Concurrent table of forward values kept for the backward pass.
//!
//! Entries are keyed by (invocation key, node index). Each entry is written
//! once by a forward frame and taken once by the matching gradient frame,
//! so a finished training step leaves the table empty.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use crate::value::{InvocationKey, Value};

const SHARDS: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CacheError {
    #[error("duplicate cache write for node {node} under key {key}")]
    DuplicateWrite { key: InvocationKey, node: u32 },
    #[error("backward before forward: no cached value for node {node} under key {key}")]
    Missing { key: InvocationKey, node: u32 },
    #[error("duplicate branch record under key {0}")]
    DuplicateBranch(InvocationKey),
    #[error("forward/backward mismatch: no branch record under key {0}")]
    MissingBranch(InvocationKey),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LedgerOp {
    Write,
    Read,
}

/// One recorded cache access.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub op: LedgerOp,
    pub key: InvocationKey,
    pub node: u32,
}

#[derive(Debug)]
pub struct ValueCache {
    values: Vec<Mutex<HashMap<(InvocationKey, u32), Value>>>,
    branches: Vec<Mutex<HashMap<InvocationKey, bool>>>,
    live: AtomicUsize,
    ledger: Option<Mutex<Vec<LedgerEntry>>>,
}

impl Default for ValueCache {
    fn default() -> Self {
        Self::new()
    }
}

fn shard_of<K: Hash>(k: &K) -> usize {
    let mut h = DefaultHasher::new();
    k.hash(&mut h);
    (h.finish() as usize) % SHARDS
}

impl ValueCache {
    pub fn new() -> Self {
        ValueCache {
            values: (0..SHARDS).map(|_| Mutex::new(HashMap::new())).collect(),
            branches: (0..SHARDS).map(|_| Mutex::new(HashMap::new())).collect(),
            live: AtomicUsize::new(0),
            ledger: None,
        }
    }

    /// A cache that also records every write and read.
    pub fn with_ledger() -> Self {
        ValueCache {
            ledger: Some(Mutex::new(Vec::new())),
            ..Self::new()
        }
    }

    fn note(&self, op: LedgerOp, key: &InvocationKey, node: u32) {
        if let Some(l) = &self.ledger {
            l.lock().expect("ledger poisoned").push(LedgerEntry {
                op,
                key: key.clone(),
                node,
            });
        }
    }

    pub fn write(&self, key: &InvocationKey, node: u32, value: Value) -> Result<(), CacheError> {
        let k = (key.clone(), node);
        let mut shard = self.values[shard_of(&k)].lock().expect("cache poisoned");
        if shard.contains_key(&k) {
            return Err(CacheError::DuplicateWrite {
                key: key.clone(),
                node,
            });
        }
        shard.insert(k, value);
        self.live.fetch_add(1, Ordering::SeqCst);
        drop(shard);
        self.note(LedgerOp::Write, key, node);
        Ok(())
    }

    /// Remove and return an entry.
    pub fn read(&self, key: &InvocationKey, node: u32) -> Result<Value, CacheError> {
        let k = (key.clone(), node);
        let v = self.values[shard_of(&k)]
            .lock()
            .expect("cache poisoned")
            .remove(&k)
            .ok_or_else(|| CacheError::Missing {
                key: key.clone(),
                node,
            })?;
        self.live.fetch_sub(1, Ordering::SeqCst);
        self.note(LedgerOp::Read, key, node);
        Ok(v)
    }

    pub fn record_branch(&self, key: &InvocationKey, taken_then: bool) -> Result<(), CacheError> {
        let mut shard = self.branches[shard_of(key)].lock().expect("cache poisoned");
        if shard.insert(key.clone(), taken_then).is_some() {
            return Err(CacheError::DuplicateBranch(key.clone()));
        }
        self.live.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }

    pub fn take_branch(&self, key: &InvocationKey) -> Result<bool, CacheError> {
        let taken = self.branches[shard_of(key)]
            .lock()
            .expect("cache poisoned")
            .remove(key)
            .ok_or_else(|| CacheError::MissingBranch(key.clone()))?;
        self.live.fetch_sub(1, Ordering::SeqCst);
        Ok(taken)
    }

    /// Entries (values and branch records) currently held.
    pub fn len(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ledger(&self) -> Vec<LedgerEntry> {
        self.ledger
            .as_ref()
            .map(|l| l.lock().expect("ledger poisoned").clone())
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use std::sync::Arc;

    fn key(p: &[u32]) -> InvocationKey {
        p.iter().fold(InvocationKey::root(), |k, i| k.child(*i))
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = ValueCache::new();
        let t = Tensor::from_rows(&[&[0.1, -3.5e-300, f64::MAX]]);
        c.write(&key(&[1, 2]), 7, t.clone().into()).unwrap();
        let back = c.read(&key(&[1, 2]), 7).unwrap();
        let back = back.as_tensor().unwrap();
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(c.is_empty());
    }

    #[test]
    fn siblings_do_not_collide_and_duplicates_fail() {
        let c = ValueCache::new();
        c.write(&key(&[3]), 1, Value::Unit).unwrap();
        c.write(&key(&[4]), 1, Value::Unit).unwrap();
        assert!(matches!(
            c.write(&key(&[3]), 1, Value::Unit),
            Err(CacheError::DuplicateWrite { .. })
        ));
    }

    #[test]
    fn wrong_key_is_an_error() {
        let c = ValueCache::new();
        c.write(&key(&[3]), 1, Value::Unit).unwrap();
        let err = c.read(&key(&[4]), 1).unwrap_err();
        assert!(err.to_string().contains("backward before forward"));
        assert!(err.to_string().contains("/4"));
        assert!(c.take_branch(&key(&[3])).unwrap_err().to_string().contains("mismatch"));
    }

    #[test]
    fn concurrent_stress() {
        let c = Arc::new(ValueCache::with_ledger());
        let handles: Vec<_> = (0..8u32)
            .map(|t| {
                let c = c.clone();
                std::thread::spawn(move || {
                    for i in 0..1000u32 {
                        let k = key(&[t, i]);
                        c.write(&k, i % 5, Tensor::scalar((t * 1000 + i) as f64).into())
                            .unwrap();
                        if i % 2 == 1 {
                            let prev = key(&[t, i - 1]);
                            let v = c.read(&prev, (i - 1) % 5).unwrap();
                            assert_eq!(v.as_tensor().unwrap().item(), (t * 1000 + i - 1) as f64);
                        }
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(c.len(), 8 * 500);
        for t in 0..8u32 {
            for i in (1..1000u32).step_by(2) {
                let v = c.read(&key(&[t, i]), i % 5).unwrap();
                assert_eq!(v.as_tensor().unwrap().item(), (t * 1000 + i) as f64);
            }
        }
        assert!(c.is_empty());
        let ledger = c.ledger();
        assert_eq!(ledger.len(), 16000);
    }
}
