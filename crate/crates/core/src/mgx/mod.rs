//! Object-granularity protection with version numbers generated on-chip.
//!
//! Nothing but ciphertext and one 8-byte MAC per `k`-byte chunk goes to
//! DRAM. The version number for a store or load is supplied by the caller,
//! normally through [`MgxState::resolve`]. In debug mode a [`WriteLedger`]
//! rejects any (cipher block, version) reuse and a [`ShadowBook`] checks
//! every load against the store that produced it.

mod ledger;
mod state;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ledger::{ShadowBook, WriteLedger};
pub use state::{Counter, MgxState, VnGenerator, VnSource, CTR_I_BITS, MAX_VID, VID_BITS};

use crate::crypto::{compute_mac, KeyPair, Keystream, MacKey, MacTag, CIPHER_BLOCK};
use crate::dram::{
    AccessClass, AccessOp, AccessRecord, DramError, PhysicalMemory, DEFAULT_CAPACITY, LINE_BYTES,
};
use crate::EngineMode;

pub const MAC_BYTES: u64 = 8;
pub const DEFAULT_MAC_GRANULARITY: u64 = 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MgxError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("vertex id {0} outside 1..=255")]
    InvalidVid(u32),
    #[error(
        "offset {offset} of object {obj_id} is not a multiple of the {k}-byte MAC granularity"
    )]
    Misaligned { obj_id: u32, offset: u64, k: u64 },
    #[error("range {offset}+{len} exceeds object {obj_id} of {size} bytes")]
    OutOfBounds {
        obj_id: u32,
        offset: u64,
        len: u64,
        size: u64,
    },
    #[error("version number {vn:#x} reused for address {pa:#x}")]
    LedgerViolation { pa: u64, vn: u64 },
    #[error("load does not match the last store: {0}")]
    Correctness(String),
    #[error("tamper detected in object {obj_id}, chunk {chunk}")]
    Tamper { obj_id: u32, chunk: u64 },
    #[error("engine locked after a detected tamper")]
    Locked,
    #[error(transparent)]
    Dram(#[from] DramError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MgxConfig {
    pub mac_granularity: u64,
    pub debug_ledger: bool,
}

impl Default for MgxConfig {
    fn default() -> Self {
        Self {
            mac_granularity: DEFAULT_MAC_GRANULARITY,
            debug_ledger: true,
        }
    }
}

impl MgxConfig {
    pub fn validate(&self) -> Result<(), MgxError> {
        check_granularity(self.mac_granularity)
    }
}

fn check_granularity(k: u64) -> Result<(), MgxError> {
    if k == 0 || !k.is_multiple_of(CIPHER_BLOCK) {
        return Err(MgxError::Config(format!(
            "MAC granularity {k} must be a positive multiple of {CIPHER_BLOCK}"
        )));
    }
    Ok(())
}

/// A contiguous accelerator-managed object and the location of its MACs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectDescriptor {
    pub obj_id: u32,
    pub base: u64,
    pub size: u64,
    pub mac_granularity: u64,
}

impl ObjectDescriptor {
    pub fn new(obj_id: u32, base: u64, size: u64, mac_granularity: u64) -> Result<Self, MgxError> {
        check_granularity(mac_granularity)?;
        if !base.is_multiple_of(LINE_BYTES) {
            return Err(MgxError::Config(format!(
                "object base {base:#x} not line aligned"
            )));
        }
        Ok(Self {
            obj_id,
            base,
            size,
            mac_granularity,
        })
    }

    pub fn chunks(&self) -> u64 {
        self.size.div_ceil(self.mac_granularity)
    }

    /// Start of the MAC region, right after the object.
    pub fn mac_base(&self) -> u64 {
        (self.base + self.size).div_ceil(LINE_BYTES) * LINE_BYTES
    }

    pub fn mac_region_bytes(&self) -> u64 {
        self.chunks() * MAC_BYTES
    }

    pub fn mac_addr(&self, chunk: u64) -> u64 {
        self.mac_base() + chunk * MAC_BYTES
    }

    /// First address past the object and its MACs.
    pub fn end(&self) -> u64 {
        self.mac_base() + self.mac_region_bytes()
    }

    /// Chunks covered by `[offset, offset + len)` with their byte extents.
    pub fn chunk_extents(
        &self,
        offset: u64,
        len: u64,
    ) -> impl Iterator<Item = (u64, u64, u64)> + '_ {
        let k = self.mac_granularity;
        let end = offset + len;
        let first = offset / k;
        let last = if len == 0 { first } else { end.div_ceil(k) };
        (first..last).map(move |c| (c, c * k, end.min(c * k + k)))
    }

    fn check(&self, offset: u64, len: u64) -> Result<(), MgxError> {
        if !offset.is_multiple_of(self.mac_granularity) {
            return Err(MgxError::Misaligned {
                obj_id: self.obj_id,
                offset,
                k: self.mac_granularity,
            });
        }
        if offset.checked_add(len).is_none_or(|e| e > self.size) {
            return Err(MgxError::OutOfBounds {
                obj_id: self.obj_id,
                offset,
                len,
                size: self.size,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MgxStats {
    pub stores: u64,
    pub loads: u64,
    pub rekeys: u64,
}

#[derive(Clone)]
struct Crypto {
    keys: KeyPair,
    ks: Keystream,
    mac: MacKey,
}

impl Crypto {
    fn new(keys: KeyPair) -> Self {
        Self {
            ks: Keystream::new(keys.enc()),
            mac: keys.mac().clone(),
            keys,
        }
    }
}

/// The MgX memory encryption engine with its simulated DRAM.
#[derive(Clone)]
pub struct MgxMee {
    mem: PhysicalMemory,
    crypto: Option<Crypto>,
    state: MgxState,
    ledger: Option<WriteLedger>,
    shadow: Option<ShadowBook>,
    stats: MgxStats,
    locked: bool,
}

impl std::fmt::Debug for MgxMee {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MgxMee")
            .field("state", &self.state)
            .field("functional", &self.crypto.is_some())
            .field("debug", &self.ledger.is_some())
            .finish()
    }
}

impl MgxMee {
    pub fn new(cfg: &MgxConfig, mode: EngineMode, keys: &KeyPair) -> Result<Self, MgxError> {
        cfg.validate()?;
        let (mem, crypto) = match mode {
            EngineMode::Functional => (
                PhysicalMemory::new(DEFAULT_CAPACITY),
                Some(Crypto::new(keys.clone())),
            ),
            EngineMode::Accounting => (PhysicalMemory::accounting(DEFAULT_CAPACITY), None),
        };
        Ok(Self {
            mem,
            crypto,
            state: MgxState::default(),
            ledger: cfg.debug_ledger.then(WriteLedger::default),
            shadow: cfg.debug_ledger.then(ShadowBook::default),
            stats: MgxStats::default(),
            locked: false,
        })
    }

    pub fn keep_log(mut self, keep: bool) -> Self {
        self.mem = self.mem.with_log(keep);
        self
    }

    pub fn dram(&self) -> &PhysicalMemory {
        &self.mem
    }

    pub fn dram_mut(&mut self) -> &mut PhysicalMemory {
        &mut self.mem
    }

    pub fn state(&self) -> &MgxState {
        &self.state
    }

    pub fn ledger(&self) -> Option<&WriteLedger> {
        self.ledger.as_ref()
    }

    pub fn stats(&self) -> MgxStats {
        self.stats
    }

    pub fn is_locked(&self) -> bool {
        self.locked
    }

    /// Applies an update step. A wrapped input counter moves to fresh keys;
    /// data stored under the old keys is no longer readable.
    pub fn advance(&mut self, counter: Counter) {
        if self.state.advance(counter) {
            self.stats.rekeys += 1;
            if let Some(c) = self.crypto.as_mut() {
                *c = Crypto::new(c.keys.derive_next());
            }
            if let Some(l) = self.ledger.as_mut() {
                l.reset();
            }
            if let Some(s) = self.shadow.as_mut() {
                s.clear();
            }
        }
    }

    pub fn resolve(&self, src: VnSource) -> Result<u64, MgxError> {
        self.state.resolve(src)
    }

    /// Encrypts `plaintext` into the object at `offset` and returns the DRAM
    /// transactions: one data write and one MAC write per chunk.
    pub fn mgx_store(
        &mut self,
        obj: &ObjectDescriptor,
        vn: u64,
        offset: u64,
        plaintext: &[u8],
    ) -> Result<Vec<AccessRecord>, MgxError> {
        let start = self.mem.log().len();
        self.store(obj, vn, offset, plaintext.len() as u64, Some(plaintext))?;
        Ok(self.mem.log()[start..].to_vec())
    }

    /// Fetches, verifies and decrypts `[offset, offset + len)` of the object.
    pub fn mgx_load(
        &mut self,
        obj: &ObjectDescriptor,
        vn: u64,
        offset: u64,
        len: u64,
    ) -> Result<(Vec<u8>, Vec<AccessRecord>), MgxError> {
        let start = self.mem.log().len();
        let mut out = vec![0u8; len as usize];
        self.load(obj, vn, offset, len, Some(&mut out))?;
        Ok((out, self.mem.log()[start..].to_vec()))
    }

    /// Store without materializing results. `data` may be omitted in
    /// accounting mode.
    pub fn store(
        &mut self,
        obj: &ObjectDescriptor,
        vn: u64,
        offset: u64,
        len: u64,
        data: Option<&[u8]>,
    ) -> Result<(), MgxError> {
        if self.locked {
            return Err(MgxError::Locked);
        }
        obj.check(offset, len)?;
        if len == 0 {
            return Ok(());
        }
        let pa = obj.base + offset;
        if let Some(l) = self.ledger.as_mut() {
            l.record(pa..pa + len, vn)
                .map_err(|at| MgxError::LedgerViolation { pa: at, vn })?;
        }
        self.stats.stores += 1;
        match &self.crypto {
            Some(c) => {
                let Some(plain) = data else {
                    return Err(MgxError::Config("functional store without data".into()));
                };
                assert_eq!(plain.len() as u64, len);
                let mut ct = plain.to_vec();
                c.ks.apply(pa, vn, &mut ct)
                    .expect("object bases are line aligned");
                let tags: Vec<_> = obj
                    .chunk_extents(offset, len)
                    .map(|(chunk, cs, ce)| {
                        let body = &ct[(cs - offset) as usize..(ce - offset) as usize];
                        (chunk, compute_mac(&c.mac, body, obj.base + cs, vn))
                    })
                    .collect();
                self.mem.mem_write(pa, &ct, AccessClass::Data)?;
                for (chunk, tag) in tags {
                    self.mem.mem_write(
                        obj.mac_addr(chunk),
                        &tag.to_bytes(),
                        AccessClass::MacLine,
                    )?;
                }
            }
            None => {
                self.mem
                    .record(AccessOp::Write, AccessClass::Data, pa, len)?;
                for (chunk, _, _) in obj.chunk_extents(offset, len) {
                    self.mem.record(
                        AccessOp::Write,
                        AccessClass::MacLine,
                        obj.mac_addr(chunk),
                        MAC_BYTES,
                    )?;
                }
            }
        }
        if let Some(s) = self.shadow.as_mut() {
            for (chunk, cs, ce) in obj.chunk_extents(offset, len) {
                s.stored(obj.obj_id, chunk, vn, ce - cs);
            }
        }
        Ok(())
    }

    pub fn load(
        &mut self,
        obj: &ObjectDescriptor,
        vn: u64,
        offset: u64,
        len: u64,
        out: Option<&mut [u8]>,
    ) -> Result<(), MgxError> {
        if self.locked {
            return Err(MgxError::Locked);
        }
        obj.check(offset, len)?;
        if len == 0 {
            return Ok(());
        }
        if let Some(s) = &self.shadow {
            for (chunk, cs, ce) in obj.chunk_extents(offset, len) {
                match s.lookup(obj.obj_id, chunk) {
                    None => {
                        return Err(MgxError::Correctness(format!(
                            "object {} chunk {chunk} read before any store",
                            obj.obj_id
                        )))
                    }
                    Some((svn, _)) if svn != vn => {
                        return Err(MgxError::Correctness(format!(
                            "object {} chunk {chunk} read with vn {vn:#x}, stored with {svn:#x}",
                            obj.obj_id
                        )))
                    }
                    Some((_, slen)) if slen != ce - cs => {
                        return Err(MgxError::Correctness(format!(
                            "object {} chunk {chunk} read over {} bytes, stored over {slen}",
                            obj.obj_id,
                            ce - cs
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        self.stats.loads += 1;
        let pa = obj.base + offset;
        let Some(c) = &self.crypto else {
            self.mem
                .record(AccessOp::Read, AccessClass::Data, pa, len)?;
            for (chunk, _, _) in obj.chunk_extents(offset, len) {
                self.mem.record(
                    AccessOp::Read,
                    AccessClass::MacLine,
                    obj.mac_addr(chunk),
                    MAC_BYTES,
                )?;
            }
            return Ok(());
        };
        let mut ct = self.mem.mem_read(pa, len, AccessClass::Data)?;
        let mut bad = None;
        for (chunk, cs, ce) in obj.chunk_extents(offset, len) {
            let mut tag = [0u8; MAC_BYTES as usize];
            self.mem
                .read_into(obj.mac_addr(chunk), &mut tag, AccessClass::MacLine)?;
            let body = &ct[(cs - offset) as usize..(ce - offset) as usize];
            if bad.is_none()
                && compute_mac(&c.mac, body, obj.base + cs, vn) != MacTag::from_bytes(tag)
            {
                bad = Some(chunk);
            }
        }
        if let Some(chunk) = bad {
            self.locked = true;
            return Err(MgxError::Tamper {
                obj_id: obj.obj_id,
                chunk,
            });
        }
        c.ks.apply(pa, vn, &mut ct)
            .expect("object bases are line aligned");
        if let Some(o) = out {
            o.copy_from_slice(&ct);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{EncryptionKey, MacKey};
    use crate::dram::TamperAction;

    fn keys() -> KeyPair {
        KeyPair::new(
            EncryptionKey::from_bytes([4; 16]),
            MacKey::from_bytes([5; 16]),
        )
        .unwrap()
    }

    fn engine() -> MgxMee {
        MgxMee::new(&MgxConfig::default(), EngineMode::Functional, &keys()).unwrap()
    }

    fn obj(id: u32, base: u64, size: u64) -> ObjectDescriptor {
        ObjectDescriptor::new(id, base, size, 1024).unwrap()
    }

    fn data(n: usize, seed: u8) -> Vec<u8> {
        (0..n)
            .map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed))
            .collect()
    }

    #[test]
    fn one_kib_object_costs_one_mac() {
        let mut e = engine();
        let o = obj(1, 0, 1024);
        let recs = e.mgx_store(&o, 7, 0, &data(1024, 1)).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!((recs[0].class, recs[0].len), (AccessClass::Data, 1024));
        assert_eq!(
            (recs[1].class, recs[1].len, recs[1].addr),
            (AccessClass::MacLine, 8, 1024)
        );
        assert!((8.0f64 / 1024.0 - 0.0078125).abs() < 1e-12);
        let (back, recs) = e.mgx_load(&o, 7, 0, 1024).unwrap();
        assert_eq!(back, data(1024, 1));
        assert_eq!(recs.len(), 2);
    }

    #[test]
    fn zero_length_store_is_free() {
        let mut e = engine();
        assert!(e.mgx_store(&obj(1, 0, 1024), 1, 0, &[]).unwrap().is_empty());
    }

    #[test]
    fn partial_store_then_matching_load() {
        let mut e = engine();
        let o = obj(1, 0, 4096);
        e.mgx_store(&o, 3, 0, &data(512, 2)).unwrap();
        assert_eq!(e.mgx_load(&o, 3, 0, 512).unwrap().0, data(512, 2));
        // The unwritten remainder of the chunk must not be read.
        assert!(matches!(
            e.mgx_load(&o, 3, 0, 1024),
            Err(MgxError::Correctness(_))
        ));
        assert!(matches!(
            e.mgx_load(&o, 3, 1024, 1024),
            Err(MgxError::Correctness(_))
        ));
        assert!(matches!(
            e.mgx_load(&o, 4, 0, 512),
            Err(MgxError::Correctness(_))
        ));
    }

    #[test]
    fn tail_chunk_is_shorter() {
        let mut e = engine();
        let o = obj(1, 0, 2500);
        let recs = e.mgx_store(&o, 1, 0, &data(2500, 3)).unwrap();
        assert_eq!(recs.len(), 1 + 3);
        assert_eq!(
            e.mgx_load(&o, 1, 2048, 452).unwrap().0,
            data(2500, 3)[2048..].to_vec()
        );
    }

    #[test]
    fn vn_reuse_is_a_ledger_violation() {
        let mut e = engine();
        let o = obj(1, 0, 2048);
        e.mgx_store(&o, 9, 0, &data(2048, 0)).unwrap();
        assert_eq!(
            e.mgx_store(&o, 9, 1024, &data(1024, 0)).unwrap_err(),
            MgxError::LedgerViolation { pa: 1024, vn: 9 }
        );
        e.mgx_store(&o, 10, 0, &data(2048, 1)).unwrap();
    }

    #[test]
    fn alignment_and_bounds() {
        let mut e = engine();
        let o = obj(1, 0, 2048);
        assert!(matches!(
            e.mgx_store(&o, 1, 16, &[0; 16]),
            Err(MgxError::Misaligned { .. })
        ));
        assert!(matches!(
            e.mgx_store(&o, 1, 1024, &[0; 2048]),
            Err(MgxError::OutOfBounds { .. })
        ));
        assert!(ObjectDescriptor::new(1, 0, 64, 100).is_err());
        assert!(ObjectDescriptor::new(1, 8, 64, 1024).is_err());
    }

    #[test]
    fn no_version_number_traffic() {
        let mut e = engine();
        let o = obj(1, 0, 8192);
        e.mgx_store(&o, 1, 0, &data(8192, 0)).unwrap();
        e.mgx_load(&o, 1, 2048, 4096).unwrap();
        assert!(e
            .dram()
            .log()
            .iter()
            .all(|r| matches!(r.class, AccessClass::Data | AccessClass::MacLine)));
    }

    #[test]
    fn replay_of_old_version_rejected() {
        let cfg = MgxConfig {
            debug_ledger: false,
            ..Default::default()
        };
        let mut e = MgxMee::new(&cfg, EngineMode::Functional, &keys()).unwrap();
        let o = obj(1, 0, 1024);
        e.mgx_store(
            &o,
            e.resolve(VnSource::Feature(2)).unwrap(),
            0,
            &data(1024, 0),
        )
        .unwrap();
        let snap = e
            .dram_mut()
            .snapshot(std::slice::from_ref(&(0..o.end())))
            .unwrap();
        e.advance(Counter::Input);
        let vn = e.resolve(VnSource::Feature(2)).unwrap();
        e.mgx_store(&o, vn, 0, &data(1024, 1)).unwrap();
        e.dram_mut()
            .inject(&TamperAction::Replay { snapshot: snap })
            .unwrap();
        assert!(matches!(
            e.mgx_load(&o, vn, 0, 1024),
            Err(MgxError::Tamper {
                obj_id: 1,
                chunk: 0
            })
        ));
        assert_eq!(e.mgx_load(&o, vn, 0, 1024).unwrap_err(), MgxError::Locked);
    }

    #[test]
    fn relocation_rejected() {
        let mut e = engine();
        let a = obj(1, 0, 1024);
        let b = obj(2, a.end().div_ceil(64) * 64, 1024);
        e.mgx_store(&a, 5, 0, &data(1024, 0)).unwrap();
        e.mgx_store(&b, 5, 0, &data(1024, 1)).unwrap();
        e.dram_mut()
            .inject(&TamperAction::Relocate {
                moves: vec![
                    crate::dram::RegionMove {
                        src: a.base,
                        dst: b.base,
                        len: 1024,
                    },
                    crate::dram::RegionMove {
                        src: a.mac_base(),
                        dst: b.mac_base(),
                        len: 8,
                    },
                ],
            })
            .unwrap();
        assert!(matches!(
            e.mgx_load(&b, 5, 0, 1024),
            Err(MgxError::Tamper { obj_id: 2, .. })
        ));
    }

    #[test]
    fn new_model_version_round_trips() {
        let mut e = engine();
        let w = obj(1, 0, 2048);
        e.mgx_store(&w, e.state().getvn_w(), 0, &data(2048, 0))
            .unwrap();
        e.advance(Counter::Model);
        let vn = e.state().getvn_w();
        e.mgx_store(&w, vn, 0, &data(2048, 9)).unwrap();
        assert_eq!(e.mgx_load(&w, vn, 0, 2048).unwrap().0, data(2048, 9));
    }

    #[test]
    fn rekey_on_input_wrap() {
        let mut e = engine();
        e.state.ctr_i = (1 << CTR_I_BITS) - 1;
        let o = obj(1, 0, 1024);
        e.mgx_store(
            &o,
            e.resolve(VnSource::Feature(1)).unwrap(),
            0,
            &data(1024, 0),
        )
        .unwrap();
        e.advance(Counter::Input);
        assert_eq!(e.stats().rekeys, 1);
        assert_eq!(e.ledger().unwrap().pairs(), 0);
        let vn = e.resolve(VnSource::Feature(1)).unwrap();
        e.mgx_store(&o, vn, 0, &data(1024, 1)).unwrap();
        assert_eq!(e.mgx_load(&o, vn, 0, 1024).unwrap().0, data(1024, 1));
    }

    #[test]
    fn accounting_mode_logs_same_transactions() {
        let mut f = engine();
        let mut a = MgxMee::new(&MgxConfig::default(), EngineMode::Accounting, &keys()).unwrap();
        let o = obj(1, 4096, 3000);
        f.store(&o, 1, 0, 3000, Some(&data(3000, 0))).unwrap();
        a.store(&o, 1, 0, 3000, None).unwrap();
        f.load(&o, 1, 1024, 1976, None).unwrap();
        a.load(&o, 1, 1024, 1976, None).unwrap();
        assert_eq!(f.dram().log(), a.dram().log());
    }
}
