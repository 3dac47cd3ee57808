use std::collections::HashMap;

use crate::dram::LINE_BYTES;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LineKind {
    DataMac,
    Counter { level: usize, index: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheEntry {
    pub addr: u64,
    pub kind: LineKind,
    pub bytes: [u8; LINE_BYTES as usize],
    pub dirty: bool,
    stamp: u64,
    pinned: bool,
}

impl CacheEntry {
    pub fn new(addr: u64, kind: LineKind, bytes: [u8; LINE_BYTES as usize]) -> Self {
        Self {
            addr,
            kind,
            bytes,
            dirty: false,
            stamp: 0,
            pinned: false,
        }
    }
}

/// Fully-associative LRU cache of 64-byte metadata lines.
///
/// Slots are stable: an entry keeps its slot index until it is removed.
/// Pinned entries are never chosen as victims; when every resident entry is
/// pinned an insert may temporarily exceed capacity.
#[derive(Clone, Debug)]
pub struct MetaCache {
    capacity: usize,
    slots: Vec<Option<CacheEntry>>,
    free: Vec<usize>,
    index: HashMap<u64, usize>,
    clock: u64,
}

impl MetaCache {
    pub fn new(capacity_lines: usize) -> Self {
        Self {
            capacity: capacity_lines,
            slots: Vec::with_capacity(capacity_lines),
            free: Vec::new(),
            index: HashMap::with_capacity(capacity_lines * 2),
            clock: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.len() >= self.capacity
    }

    pub fn lookup(&self, addr: u64) -> Option<usize> {
        self.index.get(&addr).copied()
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.index.contains_key(&addr)
    }

    pub fn touch(&mut self, slot: usize) {
        self.clock += 1;
        self.slots[slot].as_mut().expect("live slot").stamp = self.clock;
    }

    pub fn get(&self, slot: usize) -> &CacheEntry {
        self.slots[slot].as_ref().expect("live slot")
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut CacheEntry {
        self.slots[slot].as_mut().expect("live slot")
    }

    pub fn set_pinned(&mut self, slot: usize, pinned: bool) {
        self.get_mut(slot).pinned = pinned;
    }

    /// Least-recently-used unpinned entry.
    pub fn victim(&self) -> Option<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().filter(|e| !e.pinned).map(|e| (e.stamp, i)))
            .min()
            .map(|(_, i)| i)
    }

    pub fn remove(&mut self, slot: usize) -> CacheEntry {
        let e = self.slots[slot].take().expect("live slot");
        self.index.remove(&e.addr);
        self.free.push(slot);
        e
    }

    /// Inserts as most-recently-used and returns the slot.
    pub fn insert(&mut self, mut entry: CacheEntry) -> usize {
        debug_assert!(!self.contains(entry.addr));
        self.clock += 1;
        entry.stamp = self.clock;
        entry.pinned = false;
        let addr = entry.addr;
        let slot = match self.free.pop() {
            Some(s) => {
                self.slots[s] = Some(entry);
                s
            }
            None => {
                self.slots.push(Some(entry));
                self.slots.len() - 1
            }
        };
        self.index.insert(addr, slot);
        slot
    }

    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.slots.iter().flatten()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(addr: u64) -> CacheEntry {
        CacheEntry::new(addr, LineKind::DataMac, [0; 64])
    }

    #[test]
    fn lru_order_follows_touches() {
        let mut c = MetaCache::new(3);
        let a = c.insert(entry(0));
        let _b = c.insert(entry(64));
        let _d = c.insert(entry(128));
        assert!(c.is_full());
        c.touch(a);
        let v = c.victim().unwrap();
        assert_eq!(c.get(v).addr, 64);
    }

    #[test]
    fn pinned_entries_are_skipped() {
        let mut c = MetaCache::new(2);
        let a = c.insert(entry(0));
        let b = c.insert(entry(64));
        c.set_pinned(a, true);
        assert_eq!(c.victim(), Some(b));
        c.set_pinned(b, true);
        assert_eq!(c.victim(), None);
    }

    #[test]
    fn slots_are_reused() {
        let mut c = MetaCache::new(2);
        let a = c.insert(entry(0));
        c.remove(a);
        assert!(!c.contains(0));
        let b = c.insert(entry(64));
        assert_eq!(a, b);
        assert_eq!(c.lookup(64), Some(b));
    }
}
