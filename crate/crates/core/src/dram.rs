//! Untrusted off-chip memory.
//!
//! Everything stored here is visible to and modifiable by the adversary. The
//! protection engines only ever place ciphertext and metadata in it, and every
//! transaction they issue is appended to an access log.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LINE_BYTES: u64 = 64;
pub const DEFAULT_CAPACITY: u64 = 8 << 30;
const PAGE_BYTES: u64 = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DramError {
    #[error("access [{addr:#x}, +{len}) exceeds capacity {capacity:#x}")]
    OutOfRange { addr: u64, len: u64, capacity: u64 },
    #[error("unknown snapshot {0}")]
    UnknownSnapshot(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessOp {
    Read,
    Write,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessClass {
    Data,
    VnLine,
    MacLine,
    TreeNode,
}

impl fmt::Display for AccessOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessOp::Read => "read",
            AccessOp::Write => "write",
        })
    }
}

impl AccessClass {
    pub const ALL: [AccessClass; 4] = [
        AccessClass::Data,
        AccessClass::VnLine,
        AccessClass::MacLine,
        AccessClass::TreeNode,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn is_meta(self) -> bool {
        self != AccessClass::Data
    }
}

impl fmt::Display for AccessClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessClass::Data => "data",
            AccessClass::VnLine => "vn_line",
            AccessClass::MacLine => "mac_line",
            AccessClass::TreeNode => "tree_node",
        })
    }
}

/// One DRAM transaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub op: AccessOp,
    pub class: AccessClass,
    pub addr: u64,
    pub len: u64,
    pub timestamp: u64,
}

/// Running byte and transaction totals, split by direction and class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrafficCounters {
    bytes: [[u64; 4]; 2],
    count: [[u64; 4]; 2],
}

impl TrafficCounters {
    fn add(&mut self, op: AccessOp, class: AccessClass, len: u64) {
        self.bytes[op as usize][class.index()] += len;
        self.count[op as usize][class.index()] += 1;
    }

    pub fn bytes(&self, op: AccessOp, class: AccessClass) -> u64 {
        self.bytes[op as usize][class.index()]
    }

    pub fn count(&self, op: AccessOp, class: AccessClass) -> u64 {
        self.count[op as usize][class.index()]
    }

    pub fn class_bytes(&self, class: AccessClass) -> u64 {
        self.bytes(AccessOp::Read, class) + self.bytes(AccessOp::Write, class)
    }

    pub fn class_count(&self, class: AccessClass) -> u64 {
        self.count(AccessOp::Read, class) + self.count(AccessOp::Write, class)
    }

    pub fn op_bytes(&self, op: AccessOp) -> u64 {
        self.bytes[op as usize].iter().sum()
    }

    pub fn meta_bytes(&self) -> u64 {
        AccessClass::ALL
            .iter()
            .filter(|c| c.is_meta())
            .map(|&c| self.class_bytes(c))
            .sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.op_bytes(AccessOp::Read) + self.op_bytes(AccessOp::Write)
    }

    /// Component-wise `self - earlier`.
    pub fn since(&self, earlier: &TrafficCounters) -> TrafficCounters {
        let mut out = TrafficCounters::default();
        for op in 0..2 {
            for c in 0..4 {
                out.bytes[op][c] = self.bytes[op][c] - earlier.bytes[op][c];
                out.count[op][c] = self.count[op][c] - earlier.count[op][c];
            }
        }
        out
    }
}

impl std::ops::AddAssign for TrafficCounters {
    fn add_assign(&mut self, rhs: Self) {
        for op in 0..2 {
            for c in 0..4 {
                self.bytes[op][c] += rhs.bytes[op][c];
                self.count[op][c] += rhs.count[op][c];
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SnapshotId(pub usize);

#[derive(Clone, Debug)]
struct Snapshot {
    ranges: Vec<(u64, Vec<u8>)>,
}

/// A contiguous copy used by relocation attacks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMove {
    pub src: u64,
    pub dst: u64,
    pub len: u64,
}

/// Adversarial modifications of off-chip memory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TamperAction {
    BitFlip {
        addr: u64,
        bit: u8,
    },
    /// Restores every range captured by the snapshot.
    Replay {
        snapshot: SnapshotId,
    },
    Relocate {
        moves: Vec<RegionMove>,
    },
    Splice {
        addr: u64,
        bytes: Vec<u8>,
    },
}

/// Sparse, byte-addressable simulated DRAM.
///
/// In accounting mode contents are discarded and reads return the fill byte;
/// only the access log and counters are maintained.
#[derive(Clone)]
pub struct PhysicalMemory {
    capacity: u64,
    pages: HashMap<u64, Box<[u8]>>,
    store_contents: bool,
    keep_log: bool,
    log: Vec<AccessRecord>,
    counters: TrafficCounters,
    seq: u64,
    snapshots: Vec<Snapshot>,
}

impl fmt::Debug for PhysicalMemory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PhysicalMemory")
            .field("capacity", &self.capacity)
            .field("pages", &self.pages.len())
            .field("transactions", &self.seq)
            .finish()
    }
}

impl Default for PhysicalMemory {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

impl PhysicalMemory {
    pub const FILL: u8 = 0x00;

    pub fn new(capacity: u64) -> Self {
        Self {
            capacity,
            pages: HashMap::new(),
            store_contents: true,
            keep_log: true,
            log: Vec::new(),
            counters: TrafficCounters::default(),
            seq: 0,
            snapshots: Vec::new(),
        }
    }

    /// Memory that only accounts for traffic.
    pub fn accounting(capacity: u64) -> Self {
        Self {
            store_contents: false,
            ..Self::new(capacity)
        }
    }

    pub fn with_log(mut self, keep: bool) -> Self {
        self.keep_log = keep;
        self
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn stores_contents(&self) -> bool {
        self.store_contents
    }

    pub fn log(&self) -> &[AccessRecord] {
        &self.log
    }

    /// Number of transactions issued so far, logged or not.
    pub fn transactions(&self) -> u64 {
        self.seq
    }

    pub fn counters(&self) -> &TrafficCounters {
        &self.counters
    }

    fn check(&self, addr: u64, len: u64) -> Result<(), DramError> {
        match addr.checked_add(len) {
            Some(end) if end <= self.capacity => Ok(()),
            _ => Err(DramError::OutOfRange {
                addr,
                len,
                capacity: self.capacity,
            }),
        }
    }

    /// Records a transaction without moving bytes.
    pub fn record(
        &mut self,
        op: AccessOp,
        class: AccessClass,
        addr: u64,
        len: u64,
    ) -> Result<(), DramError> {
        self.check(addr, len)?;
        self.counters.add(op, class, len);
        if self.keep_log {
            self.log.push(AccessRecord {
                op,
                class,
                addr,
                len,
                timestamp: self.seq,
            });
        }
        self.seq += 1;
        Ok(())
    }

    pub fn read_into(
        &mut self,
        addr: u64,
        buf: &mut [u8],
        class: AccessClass,
    ) -> Result<(), DramError> {
        self.record(AccessOp::Read, class, addr, buf.len() as u64)?;
        self.copy_out(addr, buf);
        Ok(())
    }

    pub fn mem_read(
        &mut self,
        addr: u64,
        len: u64,
        class: AccessClass,
    ) -> Result<Vec<u8>, DramError> {
        self.check(addr, len)?;
        let mut buf = vec![Self::FILL; len as usize];
        self.read_into(addr, &mut buf, class)?;
        Ok(buf)
    }

    pub fn mem_write(
        &mut self,
        addr: u64,
        bytes: &[u8],
        class: AccessClass,
    ) -> Result<(), DramError> {
        self.record(AccessOp::Write, class, addr, bytes.len() as u64)?;
        self.copy_in(addr, bytes);
        Ok(())
    }

    /// Unlogged read, as performed by an adversary probing the bus.
    pub fn peek(&self, addr: u64, len: u64) -> Result<Vec<u8>, DramError> {
        self.check(addr, len)?;
        let mut buf = vec![Self::FILL; len as usize];
        self.copy_out(addr, &mut buf);
        Ok(buf)
    }

    fn copy_out(&self, addr: u64, buf: &mut [u8]) {
        if !self.store_contents {
            buf.fill(Self::FILL);
            return;
        }
        let mut done = 0usize;
        while done < buf.len() {
            let a = addr + done as u64;
            let page = a / PAGE_BYTES;
            let off = (a % PAGE_BYTES) as usize;
            let n = (PAGE_BYTES as usize - off).min(buf.len() - done);
            match self.pages.get(&page) {
                Some(p) => buf[done..done + n].copy_from_slice(&p[off..off + n]),
                None => buf[done..done + n].fill(Self::FILL),
            }
            done += n;
        }
    }

    fn copy_in(&mut self, addr: u64, bytes: &[u8]) {
        if !self.store_contents {
            return;
        }
        let mut done = 0usize;
        while done < bytes.len() {
            let a = addr + done as u64;
            let page = a / PAGE_BYTES;
            let off = (a % PAGE_BYTES) as usize;
            let n = (PAGE_BYTES as usize - off).min(bytes.len() - done);
            let p = self
                .pages
                .entry(page)
                .or_insert_with(|| vec![Self::FILL; PAGE_BYTES as usize].into_boxed_slice());
            p[off..off + n].copy_from_slice(&bytes[done..done + n]);
            done += n;
        }
    }

    /// Captures the current contents of `region` for a later replay.
    pub fn snapshot(&mut self, region: &[Range<u64>]) -> Result<SnapshotId, DramError> {
        let mut ranges = Vec::with_capacity(region.len());
        for r in region {
            ranges.push((r.start, self.peek(r.start, r.end - r.start)?));
        }
        self.snapshots.push(Snapshot { ranges });
        Ok(SnapshotId(self.snapshots.len() - 1))
    }

    pub fn inject(&mut self, action: &TamperAction) -> Result<(), DramError> {
        match action {
            TamperAction::BitFlip { addr, bit } => {
                let mut b = self.peek(*addr, 1)?;
                b[0] ^= 1 << (bit % 8);
                self.copy_in(*addr, &b);
            }
            TamperAction::Replay { snapshot } => {
                let snap = self
                    .snapshots
                    .get(snapshot.0)
                    .ok_or(DramError::UnknownSnapshot(snapshot.0))?
                    .clone();
                for (addr, bytes) in &snap.ranges {
                    self.copy_in(*addr, bytes);
                }
            }
            TamperAction::Relocate { moves } => {
                for m in moves {
                    self.check(m.dst, m.len)?;
                    let bytes = self.peek(m.src, m.len)?;
                    self.copy_in(m.dst, &bytes);
                }
            }
            TamperAction::Splice { addr, bytes } => {
                self.check(*addr, bytes.len() as u64)?;
                self.copy_in(*addr, bytes);
            }
        }
        Ok(())
    }

    /// Writes the access log as `op,class,addr,len,timestamp`.
    pub fn export_log<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        write_access_log(&self.log, out)
    }
}

pub fn write_access_log<W: Write>(records: &[AccessRecord], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
