//! Trace replay through a protection scheme and the timing model applied to
//! the resulting traffic.
//!
//! Replay and timing are separate: a replay yields per-group traffic, and
//! any number of DRAM or compute models can be applied to it afterwards.

mod engine;
mod timing;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use engine::{Engine, Scheme, Unprotected};
pub use timing::{group_time, ComputeModel, DramModel, GroupTime, WritePolicy};

use crate::baseline::BaselineConfig;
use crate::crypto::KeyPair;
use crate::dram::{AccessClass, AccessOp, TrafficCounters};
use crate::mgx::{MgxConfig, MgxState};
use crate::workloads::{payload_for, Phase, Trace, TraceEvent};
use crate::EngineMode;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("tamper detected: {0}")]
    Tamper(String),
    /// A version number was reused or a load named the wrong version.
    #[error("security invariant violated: {0}")]
    Security(String),
    #[error("malformed trace: {0}")]
    Trace(String),
    #[error("payload mismatch: {0}")]
    Mismatch(String),
}

impl SimError {
    fn at(self, event: usize) -> Self {
        let tag = |m: String| format!("event {event}: {m}");
        match self {
            SimError::Config(m) => SimError::Config(tag(m)),
            SimError::Tamper(m) => SimError::Tamper(tag(m)),
            SimError::Security(m) => SimError::Security(tag(m)),
            SimError::Trace(m) => SimError::Trace(tag(m)),
            SimError::Mismatch(m) => SimError::Mismatch(tag(m)),
        }
    }

    pub fn is_tamper(&self) -> bool {
        matches!(self, SimError::Tamper(_))
    }
}

/// Everything besides the trace and the scheme that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub baseline: BaselineConfig,
    pub mgx: MgxConfig,
    pub dram: DramModel,
    pub compute: ComputeModel,
    pub write_policy: WritePolicy,
    /// Seeds the engine keys.
    pub key_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            baseline: BaselineConfig::default(),
            mgx: MgxConfig::default(),
            dram: DramModel::default(),
            compute: ComputeModel::default(),
            write_policy: WritePolicy::default(),
            key_seed: 1,
        }
    }
}

impl SimConfig {
    pub fn keys(&self) -> KeyPair {
        KeyPair::generate(&mut ChaCha20Rng::seed_from_u64(self.key_seed))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.dram.validate().map_err(SimError::Config)?;
        self.compute.validate().map_err(SimError::Config)?;
        self.baseline
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        self.mgx
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Per-group DRAM traffic of one replay.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrafficProfile {
    pub scheme: Scheme,
    pub groups: Vec<TrafficCounters>,
    pub total: TrafficCounters,
}

/// Steps a trace through one engine.
///
/// In functional mode every store writes `payload_for` its version and every
/// load is compared against it. Cached metadata is drained when a host group
/// hands over to a measured one, charged to the host group, and once more
/// after the last event, charged to that event's group.
#[derive(Clone, Debug)]
pub struct Simulator<'t> {
    trace: &'t Trace,
    engine: Engine,
    state: MgxState,
    next: usize,
    functional: bool,
    groups: Vec<TrafficCounters>,
    seen: TrafficCounters,
    loads_checked: u64,
    captured: Option<Vec<Vec<u8>>>,
    drained: bool,
}

impl<'t> Simulator<'t> {
    pub fn new(
        trace: &'t Trace,
        scheme: Scheme,
        cfg: &SimConfig,
        mode: EngineMode,
    ) -> Result<Self, SimError> {
        cfg.validate()?;
        if scheme == Scheme::Baseline {
            let b = &cfg.baseline;
            let end = b.region_base + b.region_bytes;
            if let Some(o) = trace
                .objects
                .iter()
                .find(|o| o.desc.base < b.region_base || o.desc.end() > end)
            {
                return Err(SimError::Config(format!(
                    "object `{}` lies outside the {} MiB protected region",
                    o.name,
                    b.region_bytes >> 20
                )));
            }
        }
        let engine =
            Engine::new(scheme, &cfg.baseline, &cfg.mgx, mode, &cfg.keys())?.keep_log(false);
        Ok(Self {
            trace,
            engine,
            state: MgxState::default(),
            next: 0,
            functional: mode == EngineMode::Functional,
            groups: vec![TrafficCounters::default(); trace.groups.len()],
            seen: TrafficCounters::default(),
            loads_checked: 0,
            captured: None,
            drained: false,
        })
    }

    /// Keeps the DRAM access log from here on.
    pub fn keep_log(mut self) -> Self {
        self.engine = self.engine.keep_log(true);
        self
    }

    /// Keeps a copy of every plaintext loaded in functional mode.
    pub fn capture_loads(mut self) -> Self {
        self.captured = Some(Vec::new());
        self
    }

    pub fn captured_loads(&self) -> &[Vec<u8>] {
        self.captured.as_deref().unwrap_or(&[])
    }

    pub fn trace(&self) -> &'t Trace {
        self.trace
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn engine_mut(&mut self) -> &mut Engine {
        &mut self.engine
    }

    pub fn state(&self) -> &MgxState {
        &self.state
    }

    /// Index of the next event to execute.
    pub fn position(&self) -> usize {
        self.next
    }

    pub fn is_done(&self) -> bool {
        self.next >= self.trace.events.len()
    }

    pub fn loads_checked(&self) -> u64 {
        self.loads_checked
    }

    /// Executes the next event and returns its index, or `None` at the end.
    pub fn step(&mut self) -> Result<Option<usize>, SimError> {
        let Some(&event) = self.trace.events.get(self.next) else {
            if !self.drained && self.next > 0 {
                self.drained = true;
                let last = self.trace.events[self.next - 1].group();
                let r = self.engine.flush();
                self.charge(last);
                r.map_err(|e| e.at(self.next - 1))?;
            }
            return Ok(None);
        };
        let i = self.next;
        if i > 0 {
            let prev = self.trace.events[i - 1].group();
            if self.phase(prev) == Some(Phase::Host)
                && self.phase(event.group()) == Some(Phase::Measured)
            {
                let r = self.engine.flush();
                self.charge(prev);
                r.map_err(|e| e.at(i))?;
            }
        }
        self.next += 1;
        let res = self.exec(event);
        self.charge(event.group());
        res.map_err(|e| e.at(i))?;
        Ok(Some(i))
    }

    fn phase(&self, group: u32) -> Option<Phase> {
        self.trace.groups.get(group as usize).map(|g| g.phase)
    }

    /// Attributes DRAM traffic since the last call to `group`.
    fn charge(&mut self, group: u32) {
        let now = *self.engine.dram().counters();
        if let Some(g) = self.groups.get_mut(group as usize) {
            *g += now.since(&self.seen);
        }
        self.seen = now;
    }

    /// Runs until the event at `index` is next, or the trace ends.
    pub fn run_until(&mut self, index: usize) -> Result<(), SimError> {
        while self.next < index && self.step()?.is_some() {}
        Ok(())
    }

    pub fn run(&mut self) -> Result<(), SimError> {
        while self.step()?.is_some() {}
        Ok(())
    }

    fn exec(&mut self, event: TraceEvent) -> Result<(), SimError> {
        let (op, obj_id, src, offset, len) = match event {
            TraceEvent::Advance { counter, .. } => {
                self.state.advance(counter);
                self.engine.advance(counter);
                return Ok(());
            }
            TraceEvent::Access {
                op,
                obj_id,
                vn_source,
                offset,
                len,
                ..
            } => (op, obj_id, vn_source, offset, len),
        };
        let obj = self
            .trace
            .objects
            .get(obj_id as usize)
            .map(|o| o.desc)
            .ok_or_else(|| SimError::Trace(format!("unknown object {obj_id}")))?;
        if event.group() as usize >= self.trace.groups.len() {
            return Err(SimError::Trace(format!("unknown group {}", event.group())));
        }
        if !self.trace.generator.accepts(src) {
            return Err(SimError::Trace(format!(
                "version source `{src}` is foreign to the {:?} generator",
                self.trace.generator
            )));
        }
        let vn = self
            .state
            .resolve(src)
            .map_err(|e| SimError::Trace(e.to_string()))?;
        match op {
            AccessOp::Write => {
                let data = self
                    .functional
                    .then(|| payload_for(obj_id, vn, offset, len));
                self.engine.write(&obj, vn, offset, len, data.as_deref())
            }
            AccessOp::Read if self.functional => {
                let mut buf = vec![0u8; len as usize];
                self.engine.read(&obj, vn, offset, len, Some(&mut buf))?;
                let want = payload_for(obj_id, vn, offset, len);
                if let Some(at) = buf.iter().zip(&want).position(|(a, b)| a != b) {
                    return Err(SimError::Mismatch(format!(
                        "load of `{}` with vn {vn:#x} differs at byte {}",
                        self.trace.objects[obj_id as usize].name,
                        offset + at as u64
                    )));
                }
                self.loads_checked += 1;
                if let Some(c) = self.captured.as_mut() {
                    c.push(buf);
                }
                Ok(())
            }
            AccessOp::Read => self.engine.read(&obj, vn, offset, len, None),
        }
    }

    pub fn profile(&self) -> TrafficProfile {
        TrafficProfile {
            scheme: self.engine.scheme(),
            groups: self.groups.clone(),
            total: self.seen,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    pub label: String,
    pub phase: Phase,
    pub traffic: TrafficCounters,
    pub time: GroupTime,
}

/// Traffic and time of the measured part of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtectionStats {
    pub scheme: Scheme,
    pub workload: String,
    /// Bytes the workload itself moves, i.e. the unprotected traffic.
    pub workload_bytes: u64,
    pub traffic: TrafficCounters,
    pub data_bytes: u64,
    pub meta_bytes: u64,
    pub data_accesses: u64,
    pub meta_accesses: u64,
    pub traffic_increase: f64,
    /// Cycles.
    pub est_time: f64,
    pub groups: Vec<GroupStats>,
}

impl ProtectionStats {
    pub fn from_profile(trace: &Trace, profile: &TrafficProfile, cfg: &SimConfig) -> Self {
        let mut traffic = TrafficCounters::default();
        let mut est_time = 0.0;
        let groups: Vec<GroupStats> = trace
            .groups
            .iter()
            .zip(&profile.groups)
            .map(|(g, t)| {
                let time = group_time(g.work, t, &cfg.dram, &cfg.compute, cfg.write_policy);
                if g.phase == Phase::Measured {
                    traffic += *t;
                    est_time += time.total;
                }
                GroupStats {
                    label: g.label.clone(),
                    phase: g.phase,
                    traffic: *t,
                    time,
                }
            })
            .collect();
        let workload_bytes = trace.measured_bytes();
        let data_bytes = traffic.class_bytes(AccessClass::Data);
        let meta_bytes = traffic.meta_bytes();
        let meta_accesses = AccessClass::ALL
            .iter()
            .filter(|c| c.is_meta())
            .map(|&c| traffic.class_count(c))
            .sum();
        let traffic_increase = if workload_bytes == 0 {
            1.0
        } else {
            (data_bytes + meta_bytes) as f64 / workload_bytes as f64
        };
        Self {
            scheme: profile.scheme,
            workload: trace.name.clone(),
            workload_bytes,
            traffic,
            data_bytes,
            meta_bytes,
            data_accesses: traffic.class_count(AccessClass::Data),
            meta_accesses,
            traffic_increase,
            est_time,
            groups,
        }
    }

    pub fn row(&self, sweep: Option<(SweepParam, u64)>) -> StatsRow {
        StatsRow {
            scheme: self.scheme.to_string(),
            workload: self.workload.clone(),
            param: sweep.map(|s| s.0.to_string()).unwrap_or_default(),
            value: sweep.map(|s| s.1.to_string()).unwrap_or_default(),
            data_bytes: self.data_bytes,
            meta_bytes: self.meta_bytes,
            traffic_increase: self.traffic_increase,
            est_time: self.est_time,
        }
    }
}

/// A failed simulation together with the statistics gathered up to the
/// failing event, when the replay got that far.
#[derive(Debug, Clone)]
pub struct SimFailure {
    pub error: SimError,
    pub partial: Option<Box<ProtectionStats>>,
}

impl fmt::Display for SimFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for SimFailure {}

impl From<SimError> for SimFailure {
    fn from(error: SimError) -> Self {
        Self {
            error,
            partial: None,
        }
    }
}

/// Replays the trace in accounting mode and returns per-group traffic.
pub fn replay(
    trace: &Trace,
    scheme: Scheme,
    cfg: &SimConfig,
) -> Result<TrafficProfile, SimFailure> {
    let mut sim = Simulator::new(trace, scheme, cfg, EngineMode::Accounting)?;
    match sim.run() {
        Ok(()) => Ok(sim.profile()),
        Err(error) => Err(SimFailure {
            error,
            partial: Some(Box::new(ProtectionStats::from_profile(
                trace,
                &sim.profile(),
                cfg,
            ))),
        }),
    }
}

pub fn simulate(
    trace: &Trace,
    scheme: Scheme,
    cfg: &SimConfig,
) -> Result<ProtectionStats, SimFailure> {
    let profile = replay(trace, scheme, cfg)?;
    Ok(ProtectionStats::from_profile(trace, &profile, cfg))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    CacheKb,
    RegionMb,
    Channels,
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::CacheKb => "cache_kb",
            SweepParam::RegionMb => "region_mb",
            SweepParam::Channels => "channels",
        })
    }
}

impl FromStr for SweepParam {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cache_kb" | "cache-kb" => Ok(SweepParam::CacheKb),
            "region_mb" | "region-mb" => Ok(SweepParam::RegionMb),
            "channels" => Ok(SweepParam::Channels),
            _ => Err(SimError::Config(format!(
                "unknown sweep parameter `{s}` (expected cache_kb, region_mb or channels)"
            ))),
        }
    }
}

impl SweepParam {
    pub fn apply(self, cfg: &mut SimConfig, value: u64) -> Result<(), SimError> {
        match self {
            SweepParam::CacheKb => cfg.baseline.cache_bytes = value << 10,
            SweepParam::RegionMb => cfg.baseline.region_bytes = value << 20,
            SweepParam::Channels => {
                cfg.dram.channels = u32::try_from(value)
                    .map_err(|_| SimError::Config(format!("{value} channels")))?
            }
        }
        cfg.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: u64,
    pub stats: ProtectionStats,
}

/// One row per value, in the order given. Values that leave the replay
/// unchanged reuse a single replay.
pub fn sweep(
    trace: &Trace,
    scheme: Scheme,
    base: &SimConfig,
    param: SweepParam,
    values: &[u64],
) -> Result<Vec<SweepRow>, SimFailure> {
    let cfgs = values
        .iter()
        .map(|&v| {
            let mut c = base.clone();
            param.apply(&mut c, v).map(|()| c)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let shared = match param {
        SweepParam::Channels => Some(replay(trace, scheme, base)?),
        _ => None,
    };
    values
        .par_iter()
        .zip(cfgs.par_iter())
        .map(|(&value, cfg)| {
            let stats = match &shared {
                Some(p) => ProtectionStats::from_profile(trace, p, cfg),
                None => simulate(trace, scheme, cfg)?,
            };
            Ok(SweepRow {
                param,
                value,
                stats,
            })
        })
        .collect()
}

pub const STATS_HEADER: [&str; 8] = [
    "scheme",
    "workload",
    "param",
    "value",
    "data_bytes",
    "meta_bytes",
    "traffic_increase",
    "est_time",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub scheme: String,
    pub workload: String,
    pub param: String,
    pub value: String,
    pub data_bytes: u64,
    pub meta_bytes: u64,
    pub traffic_increase: f64,
    pub est_time: f64,
}

pub fn write_stats_csv<W: Write>(rows: &[StatsRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(STATS_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
