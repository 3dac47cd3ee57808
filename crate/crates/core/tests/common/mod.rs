//! Reference model of the baseline engine's DRAM traffic.
//!
//! It enumerates each block's counter path from the leaf line to the root
//! and runs an explicit recency-ordered list as the metadata cache. Only
//! addresses and dirtiness are tracked; no bytes, no cryptography.

#![allow(dead_code)]

use mgx_core::dram::{AccessClass, AccessOp};

pub const LINE: u64 = 64;

fn round_up(x: u64, a: u64) -> u64 {
    x.div_ceil(a) * a
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Mac,
    Counter(usize, u64),
}

#[derive(Clone, Copy, Debug)]
struct Line {
    addr: u64,
    kind: Kind,
    dirty: bool,
    pinned: bool,
}

/// One DRAM transaction as (op, class, addr, len).
pub type Txn = (AccessOp, AccessClass, u64, u64);

pub struct PathOracle {
    base: u64,
    arity: u64,
    mac_base: u64,
    /// (first line address, line count) per counter level, leaves first.
    levels: Vec<(u64, u64)>,
    capacity: usize,
    /// Least recently used first.
    lru: Vec<Line>,
    pub log: Vec<Txn>,
}

impl PathOracle {
    pub fn new(base: u64, size: u64, arity: u64, cache_bytes: u64) -> Self {
        let blocks = size / LINE;
        let mac_base = round_up(base + size, 4096);
        let mut next = round_up(mac_base + blocks.div_ceil(8) * LINE, 4096);
        let mut levels = Vec::new();
        let mut lines = blocks.div_ceil(arity);
        loop {
            levels.push((next, lines));
            next += lines * LINE;
            if lines <= arity {
                break;
            }
            lines = lines.div_ceil(arity);
        }
        Self {
            base,
            arity,
            mac_base,
            levels,
            capacity: (cache_bytes / LINE) as usize,
            lru: Vec::new(),
            log: Vec::new(),
        }
    }

    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    /// Ancestor chain of a block: (level, line index) from the leaf up.
    pub fn path(&self, block: u64) -> Vec<(usize, u64)> {
        let mut idx = block / self.arity;
        (0..self.levels.len())
            .map(|l| {
                let here = (l, idx);
                idx /= self.arity;
                here
            })
            .collect()
    }

    fn counter_addr(&self, level: usize, idx: u64) -> u64 {
        assert!(idx < self.levels[level].1);
        self.levels[level].0 + idx * LINE
    }

    fn class(level: usize) -> AccessClass {
        if level == 0 {
            AccessClass::VnLine
        } else {
            AccessClass::TreeNode
        }
    }

    fn find(&self, addr: u64) -> Option<usize> {
        self.lru.iter().position(|l| l.addr == addr)
    }

    /// Moves a resident line to the most recently used end.
    fn touch(&mut self, pos: usize) -> usize {
        let l = self.lru.remove(pos);
        self.lru.push(l);
        self.lru.len() - 1
    }

    fn evict_one(&mut self) {
        while self.lru.len() >= self.capacity {
            let Some(v) = self.lru.iter().position(|l| !l.pinned) else {
                return;
            };
            let addr = self.lru[v].addr;
            if self.lru[v].dirty && !self.write_back(addr) {
                continue;
            }
            let v = self.find(addr).expect("victim resident");
            self.lru.remove(v);
            return;
        }
    }

    /// False when the parent had to be fetched first.
    fn write_back(&mut self, addr: u64) -> bool {
        let v = self.find(addr).expect("line resident");
        let line = self.lru[v];
        let class = match line.kind {
            Kind::Mac => AccessClass::MacLine,
            Kind::Counter(level, idx) => {
                if level + 1 < self.levels.len() {
                    let paddr = self.counter_addr(level + 1, idx / self.arity);
                    match self.find(paddr) {
                        Some(p) => {
                            let p = self.touch(p);
                            self.lru[p].dirty = true;
                        }
                        None => {
                            self.lru[v].pinned = true;
                            self.counter(level + 1, idx / self.arity);
                            let v = self.find(addr).expect("pinned line stays");
                            self.lru[v].pinned = false;
                            return false;
                        }
                    }
                }
                Self::class(level)
            }
        };
        let v = self.find(addr).expect("line resident");
        self.lru[v].dirty = false;
        self.log.push((AccessOp::Write, class, addr, LINE));
        true
    }

    /// Cleans every dirty line: MAC lines, then counter levels bottom-up,
    /// lowest address first.
    pub fn flush(&mut self) {
        let groups: Vec<Option<usize>> = std::iter::once(None)
            .chain((0..self.levels.len()).map(Some))
            .collect();
        for want in groups {
            loop {
                let next = self
                    .lru
                    .iter()
                    .filter(|l| {
                        l.dirty
                            && match l.kind {
                                Kind::Mac => want.is_none(),
                                Kind::Counter(level, _) => want == Some(level),
                            }
                    })
                    .map(|l| l.addr)
                    .min();
                match next {
                    Some(addr) => {
                        self.write_back(addr);
                    }
                    None => break,
                }
            }
        }
    }

    fn counter(&mut self, level: usize, idx: u64) -> usize {
        let addr = self.counter_addr(level, idx);
        if let Some(p) = self.find(addr) {
            return self.touch(p);
        }
        self.log
            .push((AccessOp::Read, Self::class(level), addr, LINE));
        if level + 1 < self.levels.len() {
            self.counter(level + 1, idx / self.arity);
        }
        self.evict_one();
        if let Some(p) = self.find(addr) {
            return self.touch(p);
        }
        self.lru.push(Line {
            addr,
            kind: Kind::Counter(level, idx),
            dirty: false,
            pinned: false,
        });
        self.lru.len() - 1
    }

    fn mac(&mut self, block: u64) -> usize {
        let addr = self.mac_base + block / 8 * LINE;
        if let Some(p) = self.find(addr) {
            return self.touch(p);
        }
        self.log
            .push((AccessOp::Read, AccessClass::MacLine, addr, LINE));
        self.evict_one();
        self.lru.push(Line {
            addr,
            kind: Kind::Mac,
            dirty: false,
            pinned: false,
        });
        self.lru.len() - 1
    }

    pub fn write_block(&mut self, pa: u64) {
        let block = (pa - self.base) / LINE;
        let c = self.counter(0, block / self.arity);
        self.lru[c].dirty = true;
        let m = self.mac(block);
        self.lru[m].dirty = true;
        self.log
            .push((AccessOp::Write, AccessClass::Data, pa, LINE));
    }

    pub fn read_block(&mut self, pa: u64) {
        let block = (pa - self.base) / LINE;
        self.counter(0, block / self.arity);
        self.mac(block);
        self.log.push((AccessOp::Read, AccessClass::Data, pa, LINE));
    }
}
