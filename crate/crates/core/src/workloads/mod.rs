//! Deterministic trace generators for the accelerator workloads.
//!
//! A [`Trace`] lists the objects a workload allocates, the compute groups it
//! runs, and its object-granularity reads, writes and counter updates. Each
//! access names its version number symbolically so any scheme can resolve it.

mod audit;
mod dnn;
mod gact;
mod h264;
mod network;

use std::fmt;
use std::io::{Read, Write};
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use audit::{audit, AuditReport};
pub use dnn::{cnn_inference, cnn_training, pruned, pruned_layer, rnn, CsrShape, RnnMode};
pub use gact::{gact, GactParams};
pub use h264::{decode_order, h264, H264Params, FRAME_BYTES, FRAME_MAC_GRANULARITY, ROW_BYTES};
pub use network::{
    preset_names, InputDef, LayerDef, LayerKind, LayerSpec, NetInput, NetworkDef, NetworkGraph,
    Producer, DNN_PRESETS,
};

use crate::dram::{AccessOp, LINE_BYTES};
use crate::mgx::{
    Counter, MgxError, ObjectDescriptor, VnGenerator, VnSource, DEFAULT_MAC_GRANULARITY,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("vertex id {0} exceeds the 8-bit range")]
    InvalidVid(u32),
}

impl From<MgxError> for WorkloadError {
    fn from(e: MgxError) -> Self {
        match e {
            MgxError::InvalidVid(v) => WorkloadError::InvalidVid(v),
            other => WorkloadError::Config(other.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceObject {
    pub name: String,
    pub desc: ObjectDescriptor,
}

/// Host phases load models and inputs; only measured phases enter statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Host,
    Measured,
}

/// Events in one group may overlap in time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub label: String,
    /// Compute work in multiply-accumulate operations.
    pub work: u64,
    pub phase: Phase,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceEvent {
    Access {
        op: AccessOp,
        obj_id: u32,
        vn_source: VnSource,
        offset: u64,
        len: u64,
        group: u32,
    },
    Advance {
        counter: Counter,
        group: u32,
    },
}

impl TraceEvent {
    pub fn group(&self) -> u32 {
        match *self {
            TraceEvent::Access { group, .. } | TraceEvent::Advance { group, .. } => group,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub name: String,
    pub generator: VnGenerator,
    pub objects: Vec<TraceObject>,
    pub groups: Vec<Group>,
    pub events: Vec<TraceEvent>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    op: String,
    obj_id: Option<u32>,
    vn_source: String,
    offset: u64,
    len: u64,
    group: u32,
}

impl Trace {
    /// First address past every object and its MAC region.
    pub fn footprint(&self) -> u64 {
        self.objects.iter().map(|o| o.desc.end()).max().unwrap_or(0)
    }

    pub fn object(&self, obj_id: u32) -> &ObjectDescriptor {
        &self.objects[obj_id as usize].desc
    }

    pub fn accesses(&self) -> impl Iterator<Item = (AccessOp, u32, VnSource, u64, u64, u32)> + '_ {
        self.events.iter().filter_map(|e| match *e {
            TraceEvent::Access {
                op,
                obj_id,
                vn_source,
                offset,
                len,
                group,
            } => Some((op, obj_id, vn_source, offset, len, group)),
            TraceEvent::Advance { .. } => None,
        })
    }

    /// Bytes read and written by the workload itself in measured groups.
    pub fn measured_bytes(&self) -> u64 {
        self.accesses()
            .filter(|a| self.groups[a.5 as usize].phase == Phase::Measured)
            .map(|a| a.4)
            .sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        write_events_csv(&self.events, out)
    }

    /// Replaces the events with ones read from CSV, keeping objects and groups.
    pub fn with_events_csv<R: Read>(mut self, input: R) -> Result<Self, WorkloadError> {
        let events = read_events_csv(input)?;
        for e in &events {
            if let TraceEvent::Access { obj_id, group, .. } = *e {
                if obj_id as usize >= self.objects.len() {
                    return Err(WorkloadError::Parse(format!("unknown object {obj_id}")));
                }
                if group as usize >= self.groups.len() {
                    return Err(WorkloadError::Parse(format!("unknown group {group}")));
                }
            }
        }
        self.events = events;
        Ok(self)
    }
}

fn counter_name(c: Counter) -> &'static str {
    match c {
        Counter::Input => "input",
        Counter::Model => "model",
        Counter::Genome => "genome",
        Counter::Query => "query",
    }
}

pub fn write_events_csv<W: Write>(events: &[TraceEvent], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for e in events {
        let row = match *e {
            TraceEvent::Access {
                op,
                obj_id,
                vn_source,
                offset,
                len,
                group,
            } => TraceRow {
                op: op.to_string(),
                obj_id: Some(obj_id),
                vn_source: vn_source.to_string(),
                offset,
                len,
                group,
            },
            TraceEvent::Advance { counter, group } => TraceRow {
                op: "advance".into(),
                obj_id: None,
                vn_source: counter_name(counter).into(),
                offset: 0,
                len: 0,
                group,
            },
        };
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_events_csv<R: Read>(input: R) -> Result<Vec<TraceEvent>, WorkloadError> {
    let mut r = csv::Reader::from_reader(input);
    let mut events = Vec::new();
    for (line, row) in r.deserialize::<TraceRow>().enumerate() {
        let row = row.map_err(|e| WorkloadError::Parse(format!("trace row {}: {e}", line + 1)))?;
        let bad = |m: &str| WorkloadError::Parse(format!("trace row {}: {m}", line + 1));
        let event = match row.op.as_str() {
            "advance" => TraceEvent::Advance {
                counter: match row.vn_source.as_str() {
                    "input" => Counter::Input,
                    "model" => Counter::Model,
                    "genome" => Counter::Genome,
                    "query" => Counter::Query,
                    _ => return Err(bad("unknown counter")),
                },
                group: row.group,
            },
            "read" | "write" => TraceEvent::Access {
                op: if row.op == "read" {
                    AccessOp::Read
                } else {
                    AccessOp::Write
                },
                obj_id: row.obj_id.ok_or_else(|| bad("missing obj_id"))?,
                vn_source: row.vn_source.parse().map_err(|e: String| bad(&e))?,
                offset: row.offset,
                len: row.len,
                group: row.group,
            },
            _ => return Err(bad("unknown op")),
        };
        events.push(event);
    }
    Ok(events)
}

/// Allocates objects back to back and records events.
pub(crate) struct TraceBuilder {
    trace: Trace,
    next: u64,
    k: u64,
}

impl TraceBuilder {
    pub(crate) fn new(
        name: impl Into<String>,
        generator: VnGenerator,
        k: u64,
    ) -> Result<Self, WorkloadError> {
        crate::mgx::MgxConfig {
            mac_granularity: k,
            debug_ledger: false,
        }
        .validate()?;
        Ok(Self {
            trace: Trace {
                name: name.into(),
                generator,
                objects: Vec::new(),
                groups: Vec::new(),
                events: Vec::new(),
            },
            next: 0,
            k,
        })
    }

    pub(crate) fn k(&self) -> u64 {
        self.k
    }

    pub(crate) fn object(&mut self, name: impl Into<String>, size: u64) -> u32 {
        self.object_with_k(name, size, self.k)
    }

    pub(crate) fn object_with_k(&mut self, name: impl Into<String>, size: u64, k: u64) -> u32 {
        let id = self.trace.objects.len() as u32;
        let desc =
            ObjectDescriptor::new(id, self.next, size, k).expect("aligned base and validated k");
        self.next = desc.end().div_ceil(LINE_BYTES) * LINE_BYTES;
        self.trace.objects.push(TraceObject {
            name: name.into(),
            desc,
        });
        id
    }

    pub(crate) fn group(&mut self, label: impl Into<String>, work: u64, phase: Phase) -> u32 {
        self.trace.groups.push(Group {
            label: label.into(),
            work,
            phase,
        });
        (self.trace.groups.len() - 1) as u32
    }

    pub(crate) fn size(&self, obj: u32) -> u64 {
        self.trace.objects[obj as usize].desc.size
    }

    pub(crate) fn access(
        &mut self,
        op: AccessOp,
        obj_id: u32,
        vn_source: VnSource,
        offset: u64,
        len: u64,
        group: u32,
    ) {
        self.trace.events.push(TraceEvent::Access {
            op,
            obj_id,
            vn_source,
            offset,
            len,
            group,
        });
    }

    pub(crate) fn read(&mut self, obj: u32, src: VnSource, group: u32) {
        let len = self.size(obj);
        self.access(AccessOp::Read, obj, src, 0, len, group);
    }

    pub(crate) fn write(&mut self, obj: u32, src: VnSource, group: u32) {
        let len = self.size(obj);
        self.access(AccessOp::Write, obj, src, 0, len, group);
    }

    pub(crate) fn advance(&mut self, counter: Counter, group: u32) {
        self.trace
            .events
            .push(TraceEvent::Advance { counter, group });
    }

    pub(crate) fn finish(self) -> Trace {
        self.trace
    }
}

/// Deterministic bytes a correct store of `(obj_id, vn)` holds at `offset..offset+len`.
pub fn payload_for(obj_id: u32, vn: u64, offset: u64, len: u64) -> Vec<u8> {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    let key = splitmix(splitmix(obj_id as u64) ^ vn);
    let mut out = Vec::with_capacity(len as usize);
    let mut pos = offset;
    while pos < offset + len {
        let word = splitmix(key ^ splitmix(pos / 8)).to_le_bytes();
        let take = ((8 - pos % 8) as usize).min((offset + len - pos) as usize);
        out.extend_from_slice(&word[(pos % 8) as usize..(pos % 8) as usize + take]);
        pos += take as u64;
    }
    out
}

/// Knobs shared by all generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadParams {
    pub inputs: u32,
    pub iterations: u32,
    pub timesteps: u32,
    pub sparsity: f64,
    pub mac_granularity: u64,
    pub seed: u64,
    pub h264: H264Params,
    pub gact: GactParams,
}

impl Default for WorkloadParams {
    fn default() -> Self {
        Self {
            inputs: 1,
            iterations: 1,
            timesteps: 4,
            sparsity: 0.5,
            mac_granularity: DEFAULT_MAC_GRANULARITY,
            seed: 1,
            h264: H264Params::default(),
            gact: GactParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum NetSource {
    Preset(String),
    File(PathBuf),
}

impl NetSource {
    pub fn load(&self) -> Result<NetworkDef, WorkloadError> {
        match self {
            NetSource::Preset(p) => NetworkDef::preset(p),
            NetSource::File(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| WorkloadError::Config(format!("{}: {e}", path.display())))?;
                NetworkDef::from_toml(&text)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DnnMode {
    Inference,
    Training,
    Pruned,
}

/// A workload named on the command line, e.g. `resnet50:training`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum WorkloadSpec {
    Dnn(NetSource, DnnMode),
    Rnn(NetSource, RnnMode),
    H264,
    Gact,
}

impl FromStr for WorkloadSpec {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, mode) = match s.rsplit_once(':') {
            Some((n, m)) if !m.contains('/') => (n, Some(m)),
            _ => (s, None),
        };
        let bad_mode = |m: &str| WorkloadError::Config(format!("unknown mode `{m}` for `{name}`"));
        match name {
            "h264" if mode.is_none() => return Ok(WorkloadSpec::H264),
            "gact" if mode.is_none() => return Ok(WorkloadSpec::Gact),
            "pruned" => {
                return Ok(WorkloadSpec::Dnn(
                    NetSource::Preset(mode.unwrap_or("lenet").into()),
                    DnnMode::Pruned,
                ))
            }
            "rnn" => {
                let m = match mode {
                    None | Some("inference") => RnnMode::Inference,
                    Some("training") => RnnMode::Training,
                    Some(m) => return Err(bad_mode(m)),
                };
                return Ok(WorkloadSpec::Rnn(NetSource::Preset("rnn_cell".into()), m));
            }
            _ => {}
        }
        let source = if name.ends_with(".toml") || name.contains('/') {
            NetSource::File(PathBuf::from(name))
        } else if preset_names().any(|p| p == name) {
            NetSource::Preset(name.into())
        } else {
            return Err(WorkloadError::Config(format!("unknown workload `{s}`")));
        };
        if name == "rnn_cell" {
            let m = match mode {
                None | Some("inference") => RnnMode::Inference,
                Some("training") => RnnMode::Training,
                Some(m) => return Err(bad_mode(m)),
            };
            return Ok(WorkloadSpec::Rnn(source, m));
        }
        let m = match mode {
            None | Some("inference") => DnnMode::Inference,
            Some("training") => DnnMode::Training,
            Some("pruned") => DnnMode::Pruned,
            Some("rnn") => return Ok(WorkloadSpec::Rnn(source, RnnMode::Inference)),
            Some("rnn-training") => return Ok(WorkloadSpec::Rnn(source, RnnMode::Training)),
            Some(m) => return Err(bad_mode(m)),
        };
        Ok(WorkloadSpec::Dnn(source, m))
    }
}

impl fmt::Display for WorkloadSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let src = |s: &NetSource| match s {
            NetSource::Preset(p) => p.clone(),
            NetSource::File(p) => p.display().to_string(),
        };
        match self {
            WorkloadSpec::Dnn(s, DnnMode::Inference) => write!(f, "{}:inference", src(s)),
            WorkloadSpec::Dnn(s, DnnMode::Training) => write!(f, "{}:training", src(s)),
            WorkloadSpec::Dnn(s, DnnMode::Pruned) => write!(f, "{}:pruned", src(s)),
            WorkloadSpec::Rnn(_, RnnMode::Inference) => f.write_str("rnn:inference"),
            WorkloadSpec::Rnn(_, RnnMode::Training) => f.write_str("rnn:training"),
            WorkloadSpec::H264 => f.write_str("h264"),
            WorkloadSpec::Gact => f.write_str("gact"),
        }
    }
}

impl WorkloadSpec {
    pub fn build(&self, p: &WorkloadParams) -> Result<Trace, WorkloadError> {
        let k = p.mac_granularity;
        match self {
            WorkloadSpec::Dnn(src, mode) => {
                let graph = NetworkGraph::from_def(&src.load()?)?;
                match mode {
                    DnnMode::Inference => cnn_inference(&graph, p.inputs, k),
                    DnnMode::Training => cnn_training(&graph, p.iterations, k),
                    DnnMode::Pruned => pruned(&graph, p.inputs, p.sparsity, p.seed, k),
                }
            }
            WorkloadSpec::Rnn(src, mode) => {
                let count = match mode {
                    RnnMode::Inference => p.inputs,
                    RnnMode::Training => p.iterations,
                };
                rnn(&src.load()?, p.timesteps, *mode, count, k)
            }
            WorkloadSpec::H264 => h264(&p.h264, p.seed),
            WorkloadSpec::Gact => gact(
                &GactParams {
                    k,
                    ..p.gact.clone()
                },
                p.seed,
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_is_deterministic_and_position_keyed() {
        assert_eq!(payload_for(1, 2, 0, 100), payload_for(1, 2, 0, 100));
        assert_eq!(
            payload_for(1, 2, 13, 40),
            payload_for(1, 2, 0, 53)[13..].to_vec()
        );
        assert_ne!(payload_for(1, 2, 0, 64), payload_for(1, 3, 0, 64));
        assert_ne!(payload_for(1, 2, 0, 64), payload_for(2, 2, 0, 64));
        assert!(payload_for(1, 2, 5, 0).is_empty());
    }

    #[test]
    fn workload_names_parse() {
        let r: WorkloadSpec = "resnet50:training".parse().unwrap();
        assert_eq!(
            r,
            WorkloadSpec::Dnn(NetSource::Preset("resnet50".into()), DnnMode::Training)
        );
        assert_eq!(r.to_string(), "resnet50:training");
        assert_eq!("h264".parse::<WorkloadSpec>().unwrap(), WorkloadSpec::H264);
        assert!(matches!(
            "rnn:training".parse::<WorkloadSpec>().unwrap(),
            WorkloadSpec::Rnn(_, RnnMode::Training)
        ));
        assert!(matches!(
            "nets/my.toml".parse::<WorkloadSpec>().unwrap(),
            WorkloadSpec::Dnn(NetSource::File(_), DnnMode::Inference)
        ));
        assert!("vgg".parse::<WorkloadSpec>().is_err());
        assert!("lenet:sideways".parse::<WorkloadSpec>().is_err());
    }

    #[test]
    fn trace_csv_round_trip() {
        let t = cnn_training(&NetworkGraph::preset("tiny").unwrap(), 1, 1024).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("op,obj_id,vn_source,offset,len,group\n"));
        assert!(text.contains("advance,,model,0,0,0"));
        let back = t.clone().with_events_csv(buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn csv_rejects_garbage() {
        let t = cnn_inference(&NetworkGraph::preset("tiny").unwrap(), 1, 1024).unwrap();
        let bad = "op,obj_id,vn_source,offset,len,group\nread,999,weights,0,64,0\n";
        assert!(t.clone().with_events_csv(bad.as_bytes()).is_err());
        let bad = "op,obj_id,vn_source,offset,len,group\nfetch,0,weights,0,64,0\n";
        assert!(t.with_events_csv(bad.as_bytes()).is_err());
    }
}
