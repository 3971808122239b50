//! Bounded-memory substrate: fixed-capacity ring buffers, a byte-budget
//! accountant, and a fixed-leaf segmented wave store.
//!
//! Everything here emulates the discipline a small target imposes:
//!
//! - [`CircularBuffer`] never grows after construction; pushes evict the
//!   oldest element once full.
//! - [`BudgetAccountant`] is a shared ledger of live bytes per owner with a
//!   hard ceiling and a high-water mark. The ledger charges
//!   `accounted_sample_bytes` per stored sample (the target stores two-byte
//!   shorts) regardless of the wider host representation.
//! - [`HatStore`] keeps variable-length waves in leaves of exactly
//!   `leaf_len` elements. Leaves are never shared between waves, so releasing
//!   a wave returns whole leaves to a reuse pool and per-wave slack is at most
//!   `leaf_len - 1` elements. Pooled leaves stay charged to the ledger: the
//!   backing storage only ever grows to its high-water footprint, as a static
//!   allocation on the target would.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

/// Bytes the ledger charges for one leaf pointer in the wave-store directory.
pub const LEAF_POINTER_BYTES: usize = 4;
/// Bytes the ledger charges for one wave extent record (start, length).
pub const WAVE_EXTENT_BYTES: usize = 8;

/// How `evict_for` picks victims. Only one policy exists; the enum pins the
/// contract in type form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvictionPolicy {
    /// Drop whole waves oldest-first, never below a retained minimum.
    OldestWave,
}

// ---------------------------------------------------------------------------
// Circular buffer

/// Fixed-capacity ring. `push` returns the evicted element once full.
#[derive(Debug, Clone)]
pub struct CircularBuffer<T> {
    data: Vec<T>,
    capacity: usize,
    head: usize,
}

impl<T: Copy> CircularBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "capacity must be at least 1");
        CircularBuffer { data: Vec::with_capacity(capacity), capacity, head: 0 }
    }

    /// Append `v`; once full, overwrite and return the oldest element.
    pub fn push(&mut self, v: T) -> Option<T> {
        if self.data.len() < self.capacity {
            self.data.push(v);
            None
        } else {
            let old = self.data[self.head];
            self.data[self.head] = v;
            self.head = (self.head + 1) % self.capacity;
            Some(old)
        }
    }

    /// Logical read, 0 = oldest retained element.
    pub fn get(&self, i: usize) -> Option<T> {
        if i >= self.data.len() {
            return None;
        }
        Some(self.data[(self.head + i) % self.data.len()])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.data.len() == self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = T> + '_ {
        (0..self.data.len()).map(move |i| self.get(i).unwrap())
    }

    pub fn clear(&mut self) {
        self.data.clear();
        self.head = 0;
    }
}

// ---------------------------------------------------------------------------
// Budget accountant

#[derive(Debug)]
struct AccountantInner {
    budget: usize,
    live: usize,
    high_water: usize,
    ledger: BTreeMap<String, usize>,
}

/// Shared byte ledger with a hard ceiling. Clones refer to the same ledger;
/// updates are atomic under an internal lock so pipeline stages on different
/// threads can charge it safely.
#[derive(Debug, Clone)]
pub struct BudgetAccountant(Arc<Mutex<AccountantInner>>);

impl BudgetAccountant {
    pub fn new(budget_bytes: usize) -> Self {
        BudgetAccountant(Arc::new(Mutex::new(AccountantInner {
            budget: budget_bytes,
            live: 0,
            high_water: 0,
            ledger: BTreeMap::new(),
        })))
    }

    /// Ledger with no practical ceiling, for host-side unit tests.
    pub fn unbounded() -> Self {
        Self::new(usize::MAX)
    }

    /// Unchecked bookkeeping: apply a signed delta for `owner`. Negative
    /// deltas saturate at zero. Prefer [`try_track`](Self::try_track) for
    /// allocations that must respect the ceiling.
    pub fn track(&self, owner: &str, delta: i64) {
        let mut inner = self.0.lock().unwrap();
        let entry = inner.ledger.entry(owner.to_string()).or_insert(0);
        if delta >= 0 {
            *entry += delta as usize;
            inner.live += delta as usize;
            inner.high_water = inner.high_water.max(inner.live);
        } else {
            let d = (-delta) as usize;
            let take = d.min(*entry);
            *entry -= take;
            inner.live -= take;
        }
    }

    /// Charge `bytes` to `owner` if the ceiling allows it; otherwise leave the
    /// ledger untouched and report how much room was left.
    pub fn try_track(&self, owner: &str, bytes: usize) -> Result<()> {
        let mut inner = self.0.lock().unwrap();
        let available = inner.budget.saturating_sub(inner.live);
        if bytes > available {
            return Err(Error::BudgetExceeded { owner: owner.to_string(), needed: bytes, available });
        }
        *inner.ledger.entry(owner.to_string()).or_insert(0) += bytes;
        inner.live += bytes;
        inner.high_water = inner.high_water.max(inner.live);
        Ok(())
    }

    pub fn release(&self, owner: &str, bytes: usize) {
        self.track(owner, -(bytes as i64));
    }

    pub fn live_bytes(&self) -> usize {
        self.0.lock().unwrap().live
    }

    pub fn high_water_bytes(&self) -> usize {
        self.0.lock().unwrap().high_water
    }

    pub fn budget_bytes(&self) -> usize {
        self.0.lock().unwrap().budget
    }

    pub fn owner_bytes(&self, owner: &str) -> usize {
        self.0.lock().unwrap().ledger.get(owner).copied().unwrap_or(0)
    }

    /// Per-owner live bytes, sorted by owner name.
    pub fn snapshot(&self) -> Vec<(String, usize)> {
        self.0.lock().unwrap().ledger.iter().map(|(k, v)| (k.clone(), *v)).collect()
    }
}

// ---------------------------------------------------------------------------
// Hashed-array-tree wave store

/// Opaque handle to a stored wave. Handles are never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WaveHandle(u64);

#[derive(Debug)]
struct WaveMeta {
    leaves: Vec<usize>,
    len: usize,
    sealed: bool,
}

/// Segmented store for variable-length sample waves.
///
/// Element `k` of a wave lives at leaf `k / leaf_len`, slot `k % leaf_len`.
/// New leaves are charged to the accountant (`leaf_len * sample_bytes` plus a
/// directory pointer); released leaves go back to a pool and are reused before
/// anything new is charged.
#[derive(Debug)]
pub struct HatStore {
    leaf_len: usize,
    sample_bytes: usize,
    leaves: Vec<Box<[f64]>>,
    free: Vec<usize>,
    waves: BTreeMap<u64, WaveMeta>,
    next_id: u64,
    accountant: BudgetAccountant,
    owner: String,
}

impl HatStore {
    pub fn new(leaf_len: usize, sample_bytes: usize, accountant: BudgetAccountant, owner: &str) -> Self {
        assert!(leaf_len > 0, "leaf_len must be at least 1");
        assert!(sample_bytes > 0, "sample_bytes must be at least 1");
        HatStore {
            leaf_len,
            sample_bytes,
            leaves: Vec::new(),
            free: Vec::new(),
            waves: BTreeMap::new(),
            next_id: 0,
            accountant,
            owner: owner.to_string(),
        }
    }

    fn leaf_cost(&self) -> usize {
        self.leaf_len * self.sample_bytes + LEAF_POINTER_BYTES
    }

    fn alloc_leaf(&mut self) -> Result<usize> {
        if let Some(idx) = self.free.pop() {
            return Ok(idx);
        }
        self.accountant.try_track(&self.owner, self.leaf_cost())?;
        self.leaves.push(vec![0.0; self.leaf_len].into_boxed_slice());
        Ok(self.leaves.len() - 1)
    }

    /// Open an incremental wave; extent bookkeeping is charged up front.
    pub fn begin_wave(&mut self) -> Result<WaveHandle> {
        self.accountant.try_track(&self.owner, WAVE_EXTENT_BYTES)?;
        let id = self.next_id;
        self.next_id += 1;
        self.waves.insert(id, WaveMeta { leaves: Vec::new(), len: 0, sealed: false });
        Ok(WaveHandle(id))
    }

    /// Append one sample to an open wave, allocating a leaf on each boundary.
    pub fn push(&mut self, h: WaveHandle, v: f64) -> Result<()> {
        {
            let meta = self.waves.get(&h.0).ok_or(Error::Capacity("push to released wave".into()))?;
            if meta.sealed {
                return Err(Error::Capacity("push to sealed wave".into()));
            }
            if meta.len % self.leaf_len != 0 {
                let leaf = *meta.leaves.last().unwrap();
                let slot = meta.len % self.leaf_len;
                self.leaves[leaf][slot] = v;
                self.waves.get_mut(&h.0).unwrap().len += 1;
                return Ok(());
            }
        }
        let leaf = self.alloc_leaf()?;
        self.leaves[leaf][0] = v;
        let meta = self.waves.get_mut(&h.0).unwrap();
        meta.leaves.push(leaf);
        meta.len += 1;
        Ok(())
    }

    pub fn seal(&mut self, h: WaveHandle) {
        if let Some(meta) = self.waves.get_mut(&h.0) {
            meta.sealed = true;
        }
    }

    /// Store a complete wave; leaf demand is reserved all-or-nothing so a
    /// failed append leaves the store unchanged.
    pub fn append_wave(&mut self, samples: &[f64]) -> Result<WaveHandle> {
        let needed_leaves = samples.len().div_ceil(self.leaf_len);
        let new_leaves = needed_leaves.saturating_sub(self.free.len());
        let upfront = new_leaves * self.leaf_cost() + WAVE_EXTENT_BYTES;
        let available =
            self.accountant.budget_bytes().saturating_sub(self.accountant.live_bytes());
        if upfront > available {
            return Err(Error::BudgetExceeded {
                owner: self.owner.clone(),
                needed: upfront,
                available,
            });
        }
        let h = self.begin_wave()?;
        for &v in samples {
            self.push(h, v)?;
        }
        self.seal(h);
        Ok(h)
    }

    pub fn wave_len(&self, h: WaveHandle) -> Option<usize> {
        self.waves.get(&h.0).map(|m| m.len)
    }

    /// Element `k` of a wave, via leaf addressing.
    pub fn get(&self, h: WaveHandle, k: usize) -> Option<f64> {
        let meta = self.waves.get(&h.0)?;
        if k >= meta.len {
            return None;
        }
        Some(self.leaves[meta.leaves[k / self.leaf_len]][k % self.leaf_len])
    }

    pub fn read(&self, h: WaveHandle) -> Option<Vec<f64>> {
        let meta = self.waves.get(&h.0)?;
        let mut out = Vec::with_capacity(meta.len);
        for (i, &leaf) in meta.leaves.iter().enumerate() {
            let take = (meta.len - i * self.leaf_len).min(self.leaf_len);
            out.extend_from_slice(&self.leaves[leaf][..take]);
        }
        Some(out)
    }

    /// Return a wave's leaves to the pool. Pooled leaves stay charged; only
    /// the extent record is refunded.
    pub fn release(&mut self, h: WaveHandle) {
        if let Some(meta) = self.waves.remove(&h.0) {
            self.free.extend(meta.leaves);
            self.accountant.release(&self.owner, WAVE_EXTENT_BYTES);
        }
    }

    /// Oldest stored wave (smallest handle), if any.
    pub fn oldest_wave(&self) -> Option<WaveHandle> {
        self.waves.keys().next().map(|&id| WaveHandle(id))
    }

    pub fn stored_waves(&self) -> usize {
        self.waves.len()
    }

    /// Unused trailing slots across all stored waves; at most
    /// `stored_waves * (leaf_len - 1)` by construction.
    pub fn slack_elements(&self) -> usize {
        self.waves.values().map(|m| m.leaves.len() * self.leaf_len - m.len).sum()
    }

    pub fn allocated_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn free_leaves(&self) -> usize {
        self.free.len()
    }

    pub fn leaf_len(&self) -> usize {
        self.leaf_len
    }

    /// Bytes a wave of `len` samples would need in fresh allocations.
    pub fn wave_cost_bytes(&self, len: usize) -> usize {
        len.div_ceil(self.leaf_len) * self.leaf_cost() + WAVE_EXTENT_BYTES
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_fills_then_evicts_oldest() {
        let mut cb = CircularBuffer::new(3);
        assert_eq!(cb.push(1), None);
        assert_eq!(cb.push(2), None);
        assert_eq!(cb.push(3), None);
        assert!(cb.is_full());
        assert_eq!(cb.push(4), Some(1));
        assert_eq!(cb.get(0), Some(2));
        assert_eq!(cb.get(2), Some(4));
        assert_eq!(cb.get(3), None);
        assert_eq!(cb.iter().collect::<Vec<_>>(), vec![2, 3, 4]);
    }

    #[test]
    fn ring_clear_resets_logical_order() {
        let mut cb = CircularBuffer::new(2);
        cb.push(1);
        cb.push(2);
        cb.push(3);
        cb.clear();
        assert!(cb.is_empty());
        cb.push(9);
        assert_eq!(cb.get(0), Some(9));
    }

    #[test]
    fn accountant_delta_ledger_balances() {
        let acct = BudgetAccountant::new(1000);
        acct.track("a", 100);
        acct.track("a", -100);
        assert_eq!(acct.live_bytes(), 0);
        assert_eq!(acct.high_water_bytes(), 100);
        assert_eq!(acct.owner_bytes("a"), 0);
    }

    #[test]
    fn accountant_rejects_over_budget_and_stays_clean() {
        let acct = BudgetAccountant::new(100);
        acct.try_track("a", 70).unwrap();
        let err = acct.try_track("b", 40).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { needed: 40, available: 30, .. }));
        assert_eq!(acct.live_bytes(), 70);
        assert_eq!(acct.owner_bytes("b"), 0);
    }

    #[test]
    fn accountant_negative_saturation() {
        let acct = BudgetAccountant::new(100);
        acct.track("a", 10);
        acct.track("a", -50);
        assert_eq!(acct.live_bytes(), 0);
    }

    #[test]
    fn hat_read_after_append_is_identity() {
        let acct = BudgetAccountant::unbounded();
        let mut hat = HatStore::new(100, 2, acct, "waves");
        let samples: Vec<f64> = (0..257).map(|i| i as f64 * 0.5 - 64.0).collect();
        let h = hat.append_wave(&samples).unwrap();
        assert_eq!(hat.read(h).unwrap(), samples);
        assert_eq!(hat.wave_len(h), Some(257));
        assert_eq!(hat.get(h, 256), Some(samples[256]));
        assert_eq!(hat.get(h, 257), None);
    }

    #[test]
    fn hat_slack_is_bounded_per_wave() {
        let acct = BudgetAccountant::unbounded();
        let mut hat = HatStore::new(100, 2, acct, "waves");
        hat.append_wave(&vec![1.0; 101]).unwrap(); // 2 leaves, slack 99
        hat.append_wave(&vec![1.0; 200]).unwrap(); // 2 leaves, slack 0
        hat.append_wave(&vec![1.0; 1]).unwrap(); // 1 leaf, slack 99
        assert_eq!(hat.slack_elements(), 198);
        assert!(hat.slack_elements() <= hat.stored_waves() * 99);
    }

    #[test]
    fn hat_release_pools_leaves_for_reuse_without_new_charges() {
        let acct = BudgetAccountant::new(10_000);
        let mut hat = HatStore::new(100, 2, acct.clone(), "waves");
        let h = hat.append_wave(&vec![0.0; 500]).unwrap();
        let after_first = acct.live_bytes();
        hat.release(h);
        assert_eq!(hat.free_leaves(), 5);
        // Same-size wave reuses pooled leaves; live bytes do not grow.
        hat.append_wave(&vec![1.0; 500]).unwrap();
        assert_eq!(acct.live_bytes(), after_first);
        assert_eq!(hat.allocated_leaves(), 5);
    }

    #[test]
    fn hat_append_is_all_or_nothing_under_budget() {
        let acct = BudgetAccountant::new(300);
        let mut hat = HatStore::new(100, 2, acct.clone(), "waves");
        // 150 samples need 2 leaves = 2*(200+4) + 8 = 416 bytes > 300.
        let err = hat.append_wave(&vec![0.0; 150]).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { .. }));
        assert_eq!(acct.live_bytes(), 0);
        assert_eq!(hat.stored_waves(), 0);
    }

    #[test]
    fn hat_incremental_push_matches_leaf_addressing() {
        let acct = BudgetAccountant::unbounded();
        let mut hat = HatStore::new(4, 2, acct, "capture");
        let h = hat.begin_wave().unwrap();
        for i in 0..11 {
            hat.push(h, i as f64).unwrap();
        }
        hat.seal(h);
        assert_eq!(hat.wave_len(h), Some(11));
        for i in 0..11 {
            assert_eq!(hat.get(h, i), Some(i as f64), "element {i} at leaf {}/{}", i / 4, i % 4);
        }
        assert!(hat.push(h, 0.0).is_err(), "sealed wave rejects pushes");
    }

    #[test]
    fn hat_oldest_wave_tracks_insertion_order() {
        let acct = BudgetAccountant::unbounded();
        let mut hat = HatStore::new(10, 2, acct, "waves");
        let a = hat.append_wave(&[1.0]).unwrap();
        let b = hat.append_wave(&[2.0]).unwrap();
        assert_eq!(hat.oldest_wave(), Some(a));
        hat.release(a);
        assert_eq!(hat.oldest_wave(), Some(b));
    }

    // Model-based check: the store against a plain map of Vecs, and the
    // allocator against a counter model, over a scripted op mix.
    #[test]
    fn hat_matches_naive_model_over_mixed_ops() {
        let acct = BudgetAccountant::unbounded();
        let mut hat = HatStore::new(7, 2, acct, "waves");
        let mut model: std::collections::BTreeMap<WaveHandle, Vec<f64>> = Default::default();
        // Deterministic pseudo-random script.
        let mut state = 0x2545_f491_4f6c_dd1du64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for _ in 0..400 {
            let r = next();
            if r % 3 != 0 || model.is_empty() {
                let len = (next() % 23) as usize;
                let samples: Vec<f64> = (0..len).map(|_| (next() % 1000) as f64 - 500.0).collect();
                let h = hat.append_wave(&samples).unwrap();
                model.insert(h, samples);
            } else {
                let &h = model.keys().nth((next() as usize) % model.len()).unwrap();
                hat.release(h);
                model.remove(&h);
            }
            assert_eq!(hat.stored_waves(), model.len());
            for (&h, samples) in &model {
                assert_eq!(hat.read(h).as_deref(), Some(samples.as_slice()));
            }
            assert!(hat.slack_elements() <= hat.stored_waves() * 6);
        }
    }
}
