use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::baseline::{BaselineConfig, BaselineError, BaselineMee};
use crate::crypto::KeyPair;
use crate::dram::{AccessClass, AccessOp, PhysicalMemory, DEFAULT_CAPACITY};
use crate::mgx::{Counter, MgxConfig, MgxError, MgxMee, ObjectDescriptor};
use crate::EngineMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    None,
    Baseline,
    Mgx,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::None, Scheme::Baseline, Scheme::Mgx];
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::None => "none",
            Scheme::Baseline => "baseline",
            Scheme::Mgx => "mgx",
        })
    }
}

impl FromStr for Scheme {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Scheme::None),
            "baseline" => Ok(Scheme::Baseline),
            "mgx" => Ok(Scheme::Mgx),
            _ => Err(SimError::Config(format!(
                "unknown scheme `{s}` (expected none, baseline or mgx)"
            ))),
        }
    }
}

/// Plaintext memory without any protection.
#[derive(Clone, Debug)]
pub struct Unprotected {
    mem: PhysicalMemory,
}

impl Unprotected {
    pub fn new(capacity: u64, mode: EngineMode) -> Self {
        let mem = match mode {
            EngineMode::Functional => PhysicalMemory::new(capacity),
            EngineMode::Accounting => PhysicalMemory::accounting(capacity),
        };
        Self { mem }
    }
}

/// One of the three memory systems behind a common object-level interface.
#[derive(Clone, Debug)]
pub enum Engine {
    None(Box<Unprotected>),
    Baseline(Box<BaselineMee>),
    Mgx(Box<MgxMee>),
}

fn baseline_err(e: BaselineError) -> SimError {
    match e {
        BaselineError::Tamper(ev) => SimError::Tamper(ev.to_string()),
        BaselineError::Locked => SimError::Tamper("engine locked".into()),
        other => SimError::Config(other.to_string()),
    }
}

fn mgx_err(e: MgxError) -> SimError {
    match e {
        MgxError::Tamper { .. } | MgxError::Locked => SimError::Tamper(e.to_string()),
        MgxError::LedgerViolation { .. } | MgxError::Correctness(_) => {
            SimError::Security(e.to_string())
        }
        MgxError::Misaligned { .. } | MgxError::OutOfBounds { .. } => {
            SimError::Trace(e.to_string())
        }
        other => SimError::Config(other.to_string()),
    }
}

impl Engine {
    pub fn new(
        scheme: Scheme,
        baseline: &BaselineConfig,
        mgx: &MgxConfig,
        mode: EngineMode,
        keys: &KeyPair,
    ) -> Result<Self, SimError> {
        Ok(match scheme {
            Scheme::None => Engine::None(Box::new(Unprotected::new(DEFAULT_CAPACITY, mode))),
            Scheme::Baseline => Engine::Baseline(Box::new(
                BaselineMee::new(baseline.clone(), mode, keys).map_err(baseline_err)?,
            )),
            Scheme::Mgx => Engine::Mgx(Box::new(MgxMee::new(mgx, mode, keys).map_err(mgx_err)?)),
        })
    }

    pub fn scheme(&self) -> Scheme {
        match self {
            Engine::None(_) => Scheme::None,
            Engine::Baseline(_) => Scheme::Baseline,
            Engine::Mgx(_) => Scheme::Mgx,
        }
    }

    pub fn keep_log(self, keep: bool) -> Self {
        match self {
            Engine::None(mut u) => {
                u.mem = u.mem.with_log(keep);
                Engine::None(u)
            }
            Engine::Baseline(b) => Engine::Baseline(Box::new(b.keep_log(keep))),
            Engine::Mgx(m) => Engine::Mgx(Box::new(m.keep_log(keep))),
        }
    }

    pub fn dram(&self) -> &PhysicalMemory {
        match self {
            Engine::None(u) => &u.mem,
            Engine::Baseline(b) => b.dram(),
            Engine::Mgx(m) => m.dram(),
        }
    }

    pub fn dram_mut(&mut self) -> &mut PhysicalMemory {
        match self {
            Engine::None(u) => &mut u.mem,
            Engine::Baseline(b) => b.dram_mut(),
            Engine::Mgx(m) => m.dram_mut(),
        }
    }

    pub fn is_locked(&self) -> bool {
        match self {
            Engine::None(_) => false,
            Engine::Baseline(b) => b.is_locked(),
            Engine::Mgx(m) => m.is_locked(),
        }
    }

    /// Forwards an on-chip state update; only MgX keeps such state.
    pub fn advance(&mut self, counter: Counter) {
        if let Engine::Mgx(m) = self {
            m.advance(counter);
        }
    }

    /// Drains cached metadata to DRAM; only the baseline caches any.
    pub fn flush(&mut self) -> Result<(), SimError> {
        match self {
            Engine::Baseline(b) => b.flush().map_err(baseline_err),
            _ => Ok(()),
        }
    }

    pub fn write(
        &mut self,
        obj: &ObjectDescriptor,
        vn: u64,
        offset: u64,
        len: u64,
        data: Option<&[u8]>,
    ) -> Result<(), SimError> {
        check_extent(obj, offset, len)?;
        let pa = obj.base + offset;
        match self {
            Engine::None(u) => match data {
                Some(d) if u.mem.stores_contents() => u.mem.mem_write(pa, d, AccessClass::Data),
                _ => u.mem.record(AccessOp::Write, AccessClass::Data, pa, len),
            }
            .map_err(|e| SimError::Config(e.to_string())),
            Engine::Baseline(b) => b.write_range(pa, len, data).map_err(baseline_err),
            Engine::Mgx(m) => m.store(obj, vn, offset, len, data).map_err(mgx_err),
        }
    }

    pub fn read(
        &mut self,
        obj: &ObjectDescriptor,
        vn: u64,
        offset: u64,
        len: u64,
        out: Option<&mut [u8]>,
    ) -> Result<(), SimError> {
        check_extent(obj, offset, len)?;
        let pa = obj.base + offset;
        match self {
            Engine::None(u) => match out {
                Some(buf) => u.mem.read_into(pa, buf, AccessClass::Data),
                None => u.mem.record(AccessOp::Read, AccessClass::Data, pa, len),
            }
            .map_err(|e| SimError::Config(e.to_string())),
            Engine::Baseline(b) => b.read_range(pa, len, out).map_err(baseline_err),
            Engine::Mgx(m) => m.load(obj, vn, offset, len, out).map_err(mgx_err),
        }
    }
}

fn check_extent(obj: &ObjectDescriptor, offset: u64, len: u64) -> Result<(), SimError> {
    if offset.checked_add(len).is_none_or(|end| end > obj.size) {
        return Err(SimError::Trace(format!(
            "range {offset}+{len} exceeds object {} of {} bytes",
            obj.obj_id, obj.size
        )));
    }
    Ok(())
}
