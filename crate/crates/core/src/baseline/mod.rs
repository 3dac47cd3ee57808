//! General-purpose memory protection: one stored version number per 64-byte
//! block, one MAC per block, and an integrity tree over the version numbers
//! with its root held on-chip.
//!
//! Counter lines hold `arity` 56-bit counters plus a 56-bit MAC keyed with the
//! counter held for that line by its parent (or by the root). Lines resident
//! in the metadata cache are trusted. Updates stay in the cache until a dirty
//! line is evicted; the eviction increments the parent counter and re-MACs
//! the evicted line under the new value, so freshness propagates lazily up to
//! the first resident ancestor.
//!
//! Cache policy, in the order the DRAM transactions are issued:
//!
//! * Acquire a counter line: on a miss read the line, acquire its parent
//!   (recursively) to learn the guarding counter, verify, make room, insert.
//!   If the nested evictions re-inserted the same line, use that copy.
//! * Acquire a data-MAC line: on a miss read, make room, insert.
//! * Make room: while full, take the LRU line. Clean lines are dropped. Dirty
//!   MAC lines are written back. A dirty counter line whose parent is resident
//!   (or is the root) gets the parent counter bumped, the parent touched, and
//!   is written back; otherwise the victim is pinned, its parent acquired, and
//!   the loop repeats.
//! * Write a block: acquire the leaf, increment its counter, acquire the MAC
//!   line, store the tag, write the ciphertext.
//! * Read a block: acquire the leaf, acquire the MAC line, read the ciphertext.

mod cache;
mod geometry;

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{CacheEntry, LineKind, MetaCache};
pub use geometry::{TreeGeometry, MACS_PER_LINE};

use crate::crypto::{compute_mac, KeyPair, Keystream, MacKey};
use crate::dram::{
    AccessClass, AccessRecord, DramError, PhysicalMemory, DEFAULT_CAPACITY, LINE_BYTES,
};
use crate::EngineMode;

const LINE: usize = LINE_BYTES as usize;
const FIELD: usize = 7;
const MAC_FIELD: Range<usize> = 56..63;
const MASK56: u64 = (1 << 56) - 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BaselineError {
    #[error("invalid baseline configuration: {0}")]
    Config(String),
    #[error("address {0:#x} is not 64-byte aligned")]
    Misaligned(u64),
    #[error("tamper detected: {0}")]
    Tamper(TamperEvidence),
    #[error("engine locked after a detected tamper")]
    Locked,
    #[error(transparent)]
    Dram(#[from] DramError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TamperEvidence {
    DataMac { pa: u64 },
    CounterLine { level: usize, addr: u64 },
}

impl std::fmt::Display for TamperEvidence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TamperEvidence::DataMac { pa } => write!(f, "data MAC mismatch at {pa:#x}"),
            TamperEvidence::CounterLine { level, addr } => {
                write!(
                    f,
                    "counter line at level {level} ({addr:#x}) failed verification"
                )
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub region_base: u64,
    pub region_bytes: u64,
    pub arity: u64,
    pub cache_bytes: u64,
    pub vn_bits: u32,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            region_base: 0,
            region_bytes: 128 << 20,
            arity: 8,
            cache_bytes: 4 << 10,
            vn_bits: 56,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        let bad = |m: String| Err(BaselineError::Config(m));
        if !(2..=8).contains(&self.arity) {
            return bad(format!("tree arity {} outside 2..=8", self.arity));
        }
        if self.region_bytes == 0 || !self.region_bytes.is_multiple_of(LINE_BYTES * self.arity) {
            return bad(format!(
                "region of {} bytes is not a multiple of the leaf coverage",
                self.region_bytes
            ));
        }
        if !self.region_base.is_multiple_of(LINE_BYTES) {
            return bad(format!(
                "region base {:#x} not line aligned",
                self.region_base
            ));
        }
        if !self.cache_bytes.is_multiple_of(LINE_BYTES) || self.cache_bytes / LINE_BYTES < 4 {
            return bad(format!(
                "cache of {} bytes must hold at least 4 lines",
                self.cache_bytes
            ));
        }
        if !(1..=56).contains(&self.vn_bits) {
            return bad(format!("vn_bits {} outside 1..=56", self.vn_bits));
        }
        // Eight counters and the line MAC share one line.
        debug_assert!(self.arity as usize * FIELD + FIELD < LINE);
        Ok(())
    }

    pub fn cache_lines(&self) -> usize {
        (self.cache_bytes / LINE_BYTES) as usize
    }
}

/// A metadata cache lookup, recorded when touch tracing is enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetaTouch {
    pub class: AccessClass,
    pub addr: u64,
    pub hit: bool,
}

/// Everything held on-chip, for tamper-isolation checks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OnChipState {
    pub root: Vec<u64>,
    pub lines: Vec<(u64, [u8; LINE], bool)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BaselineStats {
    /// Counter overflows; each forces re-keying and re-encryption of the region.
    pub rekeys: u64,
}

fn get56(bytes: &[u8; LINE], slot: usize) -> u64 {
    let mut w = [0u8; 8];
    w[..FIELD].copy_from_slice(&bytes[slot * FIELD..slot * FIELD + FIELD]);
    u64::from_le_bytes(w)
}

fn set56(bytes: &mut [u8; LINE], slot: usize, v: u64) {
    bytes[slot * FIELD..slot * FIELD + FIELD].copy_from_slice(&(v & MASK56).to_le_bytes()[..FIELD]);
}

fn line_mac_field(bytes: &[u8; LINE]) -> u64 {
    get56(bytes, MAC_FIELD.start / FIELD)
}

fn line_payload(bytes: &[u8; LINE]) -> [u8; 57] {
    let mut p = [0u8; 57];
    p[..56].copy_from_slice(&bytes[..56]);
    p[56] = bytes[63];
    p
}

fn line_mac(key: &MacKey, bytes: &[u8; LINE], addr: u64, parent_ctr: u64) -> u64 {
    compute_mac(key, &line_payload(bytes), addr, parent_ctr).truncate56()
}

fn counter_class(level: usize) -> AccessClass {
    if level == 0 {
        AccessClass::VnLine
    } else {
        AccessClass::TreeNode
    }
}

#[derive(Clone)]
struct Crypto {
    ks: Keystream,
    mac: MacKey,
}

/// The baseline memory encryption engine with its simulated DRAM.
#[derive(Clone)]
pub struct BaselineMee {
    cfg: BaselineConfig,
    geom: TreeGeometry,
    mem: PhysicalMemory,
    cache: MetaCache,
    root: Vec<u64>,
    crypto: Option<Crypto>,
    vn_max: u64,
    stats: BaselineStats,
    locked: bool,
    touches: Option<Vec<MetaTouch>>,
}

impl std::fmt::Debug for BaselineMee {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BaselineMee")
            .field("cfg", &self.cfg)
            .field("levels", &self.geom.levels())
            .field("functional", &self.crypto.is_some())
            .finish()
    }
}

impl BaselineMee {
    pub fn new(
        cfg: BaselineConfig,
        mode: EngineMode,
        keys: &KeyPair,
    ) -> Result<Self, BaselineError> {
        cfg.validate()?;
        let geom = TreeGeometry::new(cfg.region_base, cfg.region_bytes, cfg.arity);
        let capacity = DEFAULT_CAPACITY.max(geom.end());
        let (mem, crypto) = match mode {
            EngineMode::Functional => (
                PhysicalMemory::new(capacity),
                Some(Crypto {
                    ks: Keystream::new(keys.enc()),
                    mac: keys.mac().clone(),
                }),
            ),
            EngineMode::Accounting => (PhysicalMemory::accounting(capacity), None),
        };
        Ok(Self {
            root: vec![0; geom.root_len() as usize],
            cache: MetaCache::new(cfg.cache_lines()),
            vn_max: if cfg.vn_bits == 64 {
                u64::MAX
            } else {
                (1u64 << cfg.vn_bits) - 1
            },
            cfg,
            geom,
            mem,
            crypto,
            stats: BaselineStats::default(),
            locked: false,
            touches: None,
        })
    }

    pub fn keep_log(mut self, keep: bool) -> Self {
        self.mem = self.mem.with_log(keep);
        self
    }

    pub fn trace_touches(mut self, on: bool) -> Self {
        self.touches = on.then(Vec::new);
        self
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.cfg
    }

    pub fn geometry(&self) -> &TreeGeometry {
        &self.geom
    }

    pub fn dram(&self) -> &PhysicalMemory {
        &self.mem
    }

    pub fn dram_mut(&mut self) -> &mut PhysicalMemory {
        &mut self.mem
    }

    pub fn cache(&self) -> &MetaCache {
        &self.cache
    }

    pub fn stats(&self) -> BaselineStats {
        self.stats
    }

    pub fn is_locked(&self) -> bool {
        self.locked
    }

    pub fn touches(&self) -> &[MetaTouch] {
        self.touches.as_deref().unwrap_or(&[])
    }

    pub fn on_chip_state(&self) -> OnChipState {
        let mut lines: Vec<_> = self
            .cache
            .entries()
            .map(|e| (e.addr, e.bytes, e.dirty))
            .collect();
        lines.sort_by_key(|l| l.0);
        OnChipState {
            root: self.root.clone(),
            lines,
        }
    }

    /// Encrypts and stores one 64-byte block, returning the DRAM transactions.
    pub fn bl_write(
        &mut self,
        pa: u64,
        data: &[u8; LINE],
    ) -> Result<Vec<AccessRecord>, BaselineError> {
        if !pa.is_multiple_of(LINE_BYTES) {
            return Err(BaselineError::Misaligned(pa));
        }
        let start = self.mem.log().len();
        self.write_range(pa, LINE_BYTES, Some(data))?;
        Ok(self.mem.log()[start..].to_vec())
    }

    /// Fetches, verifies and decrypts one 64-byte block.
    pub fn bl_read(&mut self, pa: u64) -> Result<([u8; LINE], Vec<AccessRecord>), BaselineError> {
        if !pa.is_multiple_of(LINE_BYTES) {
            return Err(BaselineError::Misaligned(pa));
        }
        let start = self.mem.log().len();
        let mut out = [0u8; LINE];
        self.read_range(pa, LINE_BYTES, Some(&mut out))?;
        Ok((out, self.mem.log()[start..].to_vec()))
    }

    /// Stores `[pa, pa + len)`. Partial blocks are read, merged and rewritten.
    /// `data` may be omitted in accounting mode.
    pub fn write_range(
        &mut self,
        pa: u64,
        len: u64,
        data: Option<&[u8]>,
    ) -> Result<(), BaselineError> {
        self.guard()?;
        let r = self.write_range_inner(pa, len, data);
        self.lock_on_tamper(r)
    }

    /// Loads `[pa, pa + len)` into `out` (if given).
    pub fn read_range(
        &mut self,
        pa: u64,
        len: u64,
        out: Option<&mut [u8]>,
    ) -> Result<(), BaselineError> {
        self.guard()?;
        let r = self.read_range_inner(pa, len, out);
        self.lock_on_tamper(r)
    }

    fn guard(&self) -> Result<(), BaselineError> {
        if self.locked {
            Err(BaselineError::Locked)
        } else {
            Ok(())
        }
    }

    fn lock_on_tamper<T>(&mut self, r: Result<T, BaselineError>) -> Result<T, BaselineError> {
        if matches!(r, Err(BaselineError::Tamper(_))) {
            self.locked = true;
        }
        r
    }

    fn write_range_inner(
        &mut self,
        pa: u64,
        len: u64,
        data: Option<&[u8]>,
    ) -> Result<(), BaselineError> {
        if let Some(d) = data {
            assert_eq!(d.len() as u64, len);
        }
        let end = pa + len;
        let mut at = pa;
        while at < end {
            let block_start = at - at % LINE_BYTES;
            let seg_end = end.min(block_start + LINE_BYTES);
            let seg = (at - pa) as usize..(seg_end - pa) as usize;
            if !self.geom.contains(block_start) {
                match data {
                    Some(d) => self.mem.mem_write(at, &d[seg], AccessClass::Data)?,
                    None => self.mem.record(
                        crate::dram::AccessOp::Write,
                        AccessClass::Data,
                        at,
                        seg_end - at,
                    )?,
                }
                at = seg_end;
                continue;
            }
            let block = self.geom.block_of(block_start);
            let mut buf = [0u8; LINE];
            if at != block_start || seg_end != block_start + LINE_BYTES {
                self.read_block(block, data.is_some().then_some(&mut buf))?;
            }
            if let Some(d) = data {
                let off = (at - block_start) as usize;
                buf[off..off + seg.len()].copy_from_slice(&d[seg]);
            }
            self.write_block(block, &buf)?;
            at = seg_end;
        }
        Ok(())
    }

    fn read_range_inner(
        &mut self,
        pa: u64,
        len: u64,
        mut out: Option<&mut [u8]>,
    ) -> Result<(), BaselineError> {
        let end = pa + len;
        let mut at = pa;
        while at < end {
            let block_start = at - at % LINE_BYTES;
            let seg_end = end.min(block_start + LINE_BYTES);
            let seg = (at - pa) as usize..(seg_end - pa) as usize;
            if !self.geom.contains(block_start) {
                match out.as_deref_mut() {
                    Some(o) => self.mem.read_into(at, &mut o[seg], AccessClass::Data)?,
                    None => self.mem.record(
                        crate::dram::AccessOp::Read,
                        AccessClass::Data,
                        at,
                        seg_end - at,
                    )?,
                }
                at = seg_end;
                continue;
            }
            let block = self.geom.block_of(block_start);
            let mut buf = [0u8; LINE];
            self.read_block(block, out.is_some().then_some(&mut buf))?;
            if let Some(o) = out.as_deref_mut() {
                let off = (at - block_start) as usize;
                o[seg.clone()].copy_from_slice(&buf[off..off + seg.len()]);
            }
            at = seg_end;
        }
        Ok(())
    }

    fn write_block(&mut self, block: u64, plain: &[u8; LINE]) -> Result<(), BaselineError> {
        let (leaf, slot) = self.geom.leaf_of(block);
        let ls = self.acquire_counter(0, leaf)?;
        let vn = self.bump_counter(ls, slot);
        let pa = self.geom.block_addr(block);
        let mut ct = *plain;
        let tag = match &self.crypto {
            Some(c) => {
                c.ks.apply(pa, vn, &mut ct).expect("block aligned");
                compute_mac(&c.mac, &ct, pa, vn).truncate56()
            }
            None => 0,
        };
        let ms = self.acquire_mac_line(block)?;
        let e = self.cache.get_mut(ms);
        set56(&mut e.bytes, self.geom.mac_slot(block), tag);
        e.dirty = true;
        self.mem.mem_write(pa, &ct, AccessClass::Data)?;
        Ok(())
    }

    fn read_block(
        &mut self,
        block: u64,
        out: Option<&mut [u8; LINE]>,
    ) -> Result<(), BaselineError> {
        let (leaf, slot) = self.geom.leaf_of(block);
        let ls = self.acquire_counter(0, leaf)?;
        let vn = get56(&self.cache.get(ls).bytes, slot);
        let ms = self.acquire_mac_line(block)?;
        let tag = get56(&self.cache.get(ms).bytes, self.geom.mac_slot(block));
        let pa = self.geom.block_addr(block);
        let mut ct = [0u8; LINE];
        self.mem.read_into(pa, &mut ct, AccessClass::Data)?;
        if let Some(c) = &self.crypto {
            if vn == 0 {
                // Never written: only the all-zero fill is acceptable.
                if tag != 0 || ct.iter().any(|&b| b != 0) {
                    return Err(BaselineError::Tamper(TamperEvidence::DataMac { pa }));
                }
            } else {
                if compute_mac(&c.mac, &ct, pa, vn).truncate56() != tag {
                    return Err(BaselineError::Tamper(TamperEvidence::DataMac { pa }));
                }
                c.ks.apply(pa, vn, &mut ct).expect("block aligned");
            }
        }
        if let Some(o) = out {
            *o = ct;
        }
        Ok(())
    }

    fn note(&mut self, class: AccessClass, addr: u64, hit: bool) {
        if let Some(t) = self.touches.as_mut() {
            t.push(MetaTouch { class, addr, hit });
        }
    }

    fn increment(&mut self, v: u64) -> u64 {
        if v >= self.vn_max {
            self.stats.rekeys += 1;
            1
        } else {
            v + 1
        }
    }

    fn bump_counter(&mut self, slot: usize, idx: usize) -> u64 {
        let v = get56(&self.cache.get(slot).bytes, idx);
        let nv = self.increment(v);
        let e = self.cache.get_mut(slot);
        set56(&mut e.bytes, idx, nv);
        e.dirty = true;
        nv
    }

    fn acquire_counter(&mut self, level: usize, index: u64) -> Result<usize, BaselineError> {
        let addr = self.geom.counter_line_addr(level, index);
        let class = counter_class(level);
        if let Some(s) = self.cache.lookup(addr) {
            self.cache.touch(s);
            self.note(class, addr, true);
            return Ok(s);
        }
        self.note(class, addr, false);
        let mut bytes = [0u8; LINE];
        self.mem.read_into(addr, &mut bytes, class)?;
        let parent_ctr = match self.geom.parent_of(level, index) {
            None => self.root[index as usize],
            Some((pidx, pslot)) => {
                let ps = self.acquire_counter(level + 1, pidx)?;
                get56(&self.cache.get(ps).bytes, pslot)
            }
        };
        if let Some(c) = &self.crypto {
            let ok = if parent_ctr == 0 {
                bytes.iter().all(|&b| b == 0)
            } else {
                line_mac(&c.mac, &bytes, addr, parent_ctr) == line_mac_field(&bytes)
            };
            if !ok {
                return Err(BaselineError::Tamper(TamperEvidence::CounterLine {
                    level,
                    addr,
                }));
            }
        }
        self.make_room()?;
        if let Some(s) = self.cache.lookup(addr) {
            self.cache.touch(s);
            return Ok(s);
        }
        Ok(self.cache.insert(CacheEntry::new(
            addr,
            LineKind::Counter { level, index },
            bytes,
        )))
    }

    fn acquire_mac_line(&mut self, block: u64) -> Result<usize, BaselineError> {
        let addr = self.geom.mac_line_addr(block);
        if let Some(s) = self.cache.lookup(addr) {
            self.cache.touch(s);
            self.note(AccessClass::MacLine, addr, true);
            return Ok(s);
        }
        self.note(AccessClass::MacLine, addr, false);
        let mut bytes = [0u8; LINE];
        self.mem.read_into(addr, &mut bytes, AccessClass::MacLine)?;
        self.make_room()?;
        Ok(self
            .cache
            .insert(CacheEntry::new(addr, LineKind::DataMac, bytes)))
    }

    fn make_room(&mut self) -> Result<(), BaselineError> {
        while self.cache.is_full() {
            let Some(v) = self.cache.victim() else {
                // Everything resident is mid-writeback; overflow briefly.
                return Ok(());
            };
            if self.cache.get(v).dirty && !self.write_back(v)? {
                continue;
            }
            self.cache.remove(v);
            return Ok(());
        }
        Ok(())
    }

    /// Writes a dirty line to DRAM and marks it clean. A counter line first
    /// bumps its slot in the parent; returns false, without writing, when
    /// the parent had to be fetched instead (which may move entries).
    fn write_back(&mut self, slot: usize) -> Result<bool, BaselineError> {
        let entry = self.cache.get(slot);
        let (addr, kind) = (entry.addr, entry.kind);
        let class = match kind {
            LineKind::DataMac => AccessClass::MacLine,
            LineKind::Counter { level, index } => {
                let parent_ctr = match self.geom.parent_of(level, index) {
                    None => {
                        let nv = self.increment(self.root[index as usize]);
                        self.root[index as usize] = nv;
                        nv
                    }
                    Some((pidx, pslot)) => {
                        let paddr = self.geom.counter_line_addr(level + 1, pidx);
                        match self.cache.lookup(paddr) {
                            Some(ps) => {
                                self.cache.touch(ps);
                                self.bump_counter(ps, pslot)
                            }
                            None => {
                                self.cache.set_pinned(slot, true);
                                let r = self.acquire_counter(level + 1, pidx);
                                self.cache.set_pinned(slot, false);
                                r?;
                                return Ok(false);
                            }
                        }
                    }
                };
                if let Some(c) = &self.crypto {
                    let tag = line_mac(&c.mac, &self.cache.get(slot).bytes, addr, parent_ctr);
                    set56(
                        &mut self.cache.get_mut(slot).bytes,
                        MAC_FIELD.start / FIELD,
                        tag,
                    );
                }
                counter_class(level)
            }
        };
        let e = self.cache.get_mut(slot);
        e.dirty = false;
        let bytes = e.bytes;
        self.mem.mem_write(addr, &bytes, class)?;
        Ok(true)
    }

    /// Writes every dirty metadata line back to DRAM, leaving the lines
    /// resident and clean. MAC lines go first, then counter levels from the
    /// leaves up, each in address order.
    pub fn flush(&mut self) -> Result<(), BaselineError> {
        self.guard()?;
        let r = self.flush_inner();
        self.lock_on_tamper(r)
    }

    fn flush_inner(&mut self) -> Result<(), BaselineError> {
        let next_dirty = |cache: &MetaCache, want: Option<usize>| {
            cache
                .entries()
                .filter(|e| {
                    e.dirty
                        && match e.kind {
                            LineKind::DataMac => want.is_none(),
                            LineKind::Counter { level, .. } => want == Some(level),
                        }
                })
                .map(|e| e.addr)
                .min()
        };
        for want in std::iter::once(None).chain((0..self.geom.levels()).map(Some)) {
            while let Some(addr) = next_dirty(&self.cache, want) {
                let slot = self.cache.lookup(addr).expect("dirty line resident");
                self.write_back(slot)?;
            }
        }
        Ok(())
    }
}
