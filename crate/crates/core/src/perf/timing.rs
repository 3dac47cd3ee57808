use serde::{Deserialize, Serialize};

use crate::dram::{AccessOp, TrafficCounters, LINE_BYTES};

/// Closed-form multi-channel DRAM: aggregate bandwidth plus one fixed
/// latency per dependent access stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DramModel {
    pub channels: u32,
    pub bytes_per_cycle_per_channel: f64,
    pub fixed_access_latency: u64,
    pub line: u64,
}

impl Default for DramModel {
    fn default() -> Self {
        Self {
            channels: 1,
            bytes_per_cycle_per_channel: 8.0,
            fixed_access_latency: 100,
            line: LINE_BYTES,
        }
    }
}

impl DramModel {
    pub fn bandwidth(&self) -> f64 {
        self.channels as f64 * self.bytes_per_cycle_per_channel
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.channels == 0 {
            return Err("at least one DRAM channel is required".into());
        }
        if !(self.bytes_per_cycle_per_channel.is_finite() && self.bytes_per_cycle_per_channel > 0.0)
        {
            return Err(format!(
                "bytes_per_cycle_per_channel must be positive, got {}",
                self.bytes_per_cycle_per_channel
            ));
        }
        if self.line != LINE_BYTES {
            return Err(format!("line size is fixed at {LINE_BYTES} bytes"));
        }
        Ok(())
    }
}

/// Processing-element array throughput.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComputeModel {
    pub pes: u32,
    pub macs_per_pe_per_cycle: f64,
}

impl Default for ComputeModel {
    fn default() -> Self {
        Self {
            pes: 512,
            macs_per_pe_per_cycle: 2.0,
        }
    }
}

impl ComputeModel {
    pub fn cycles(&self, work: u64) -> f64 {
        work as f64 / (self.pes as f64 * self.macs_per_pe_per_cycle)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.pes == 0
            || !(self.macs_per_pe_per_cycle.is_finite() && self.macs_per_pe_per_cycle > 0.0)
        {
            return Err("compute throughput must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WritePolicy {
    /// Writes drain in the background and only consume bandwidth.
    #[default]
    Background,
    /// Writes also wait for their own access latency.
    Synchronous,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GroupTime {
    pub compute: f64,
    pub memory: f64,
    pub total: f64,
}

/// Compute and memory of one group overlap (double buffering), so the group
/// takes as long as the slower of the two.
pub fn group_time(
    work: u64,
    traffic: &TrafficCounters,
    dram: &DramModel,
    compute: &ComputeModel,
    policy: WritePolicy,
) -> GroupTime {
    let c = compute.cycles(work);
    let reads = traffic.op_bytes(AccessOp::Read);
    let writes = traffic.op_bytes(AccessOp::Write);
    let lat = dram.fixed_access_latency as f64;
    let mut m = (reads + writes) as f64 / dram.bandwidth();
    if reads > 0 {
        m += lat;
    }
    if writes > 0 && policy == WritePolicy::Synchronous {
        m += lat;
    }
    GroupTime {
        compute: c,
        memory: m,
        total: c.max(m),
    }
}
