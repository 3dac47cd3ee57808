//! Experiment files: everything that determines one CLI invocation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::BaselineConfig;
use crate::harness::Campaign;
use crate::mgx::{MgxConfig, DEFAULT_MAC_GRANULARITY};
use crate::perf::{ComputeModel, DramModel, Scheme, SimConfig, SimError, SweepParam, WritePolicy};
use crate::workloads::{Trace, WorkloadParams, WorkloadSpec};

/// Region sizes tried, smallest first, when none is configured.
pub const REGION_SIZES_MB: [u64; 3] = [128, 1024, 8192];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnOff {
    #[default]
    On,
    Off,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SwitchRepr {
    Bool(bool),
    Word(OnOff),
}

fn de_switch<'de, D: serde::Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    Ok(match SwitchRepr::deserialize(d)? {
        SwitchRepr::Bool(b) => b,
        SwitchRepr::Word(w) => w == OnOff::On,
    })
}

fn ser_switch<S: serde::Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
    if *v { OnOff::On } else { OnOff::Off }.serialize(s)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    /// Defaults to the smallest standard size that covers the workload.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub region_mb: Option<u64>,
    pub cache_kb: u64,
    pub tree_arity: u64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            region_mb: None,
            cache_kb: 4,
            tree_arity: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MgxSection {
    pub mac_granularity: u64,
    #[serde(deserialize_with = "de_switch", serialize_with = "ser_switch")]
    pub debug_ledger: bool,
}

impl Default for MgxSection {
    fn default() -> Self {
        Self {
            mac_granularity: DEFAULT_MAC_GRANULARITY,
            debug_ledger: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub campaign: Campaign,
    pub trials: u32,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            campaign: Campaign::Bitflip,
            trials: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub param: SweepParam,
    pub values: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            param: SweepParam::CacheKb,
            values: vec![1, 4, 8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub workload: String,
    pub scheme: Scheme,
    pub seed: u64,
    /// Events CSV replacing the generated events.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub write_policy: WritePolicy,
    pub workload_params: WorkloadParams,
    pub baseline: BaselineSection,
    pub mgx: MgxSection,
    pub dram: DramModel,
    pub compute: ComputeModel,
    pub attack: AttackSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            workload: "lenet".into(),
            scheme: Scheme::Mgx,
            seed: 1,
            trace: None,
            out: None,
            write_policy: WritePolicy::default(),
            workload_params: WorkloadParams::default(),
            baseline: BaselineSection::default(),
            mgx: MgxSection::default(),
            dram: DramModel::default(),
            compute: ComputeModel::default(),
            attack: AttackSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

fn cfg_err(e: impl std::fmt::Display) -> SimError {
    SimError::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(cfg_err)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn workload_spec(&self) -> Result<WorkloadSpec, SimError> {
        self.workload.parse().map_err(cfg_err)
    }

    pub fn workload_params(&self) -> WorkloadParams {
        WorkloadParams {
            mac_granularity: self.mgx.mac_granularity,
            seed: self.seed,
            ..self.workload_params.clone()
        }
    }

    /// Generates the workload, then substitutes the events file if one is set.
    /// An unreadable or malformed events file is a trace error, not a
    /// configuration error.
    pub fn build_trace(&self) -> Result<Trace, SimError> {
        let trace = self
            .workload_spec()?
            .build(&self.workload_params())
            .map_err(cfg_err)?;
        match &self.trace {
            None => Ok(trace),
            Some(path) => {
                let file = std::fs::File::open(path)
                    .map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
                trace
                    .with_events_csv(file)
                    .map_err(|e| SimError::Trace(format!("{}: {e}", path.display())))
            }
        }
    }

    pub fn sim_config(&self, trace: &Trace) -> Result<SimConfig, SimError> {
        let region_mb = match self.baseline.region_mb {
            Some(mb) => mb,
            None => {
                let need = trace.footprint();
                *REGION_SIZES_MB
                    .iter()
                    .find(|&&mb| mb << 20 >= need)
                    .ok_or_else(|| {
                        cfg_err(format!(
                            "workload footprint of {need} bytes exceeds every region size"
                        ))
                    })?
            }
        };
        let cfg = SimConfig {
            baseline: BaselineConfig {
                region_bytes: region_mb << 20,
                cache_bytes: self.baseline.cache_kb << 10,
                arity: self.baseline.tree_arity,
                ..BaselineConfig::default()
            },
            mgx: MgxConfig {
                mac_granularity: self.mgx.mac_granularity,
                debug_ledger: self.mgx.debug_ledger,
            },
            dram: self.dram.clone(),
            compute: self.compute.clone(),
            write_policy: self.write_policy,
            key_seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig {
            workload: "resnet50:training".into(),
            scheme: Scheme::Baseline,
            seed: 9,
            out: Some("stats.csv".into()),
            ..Default::default()
        };
        c.baseline.region_mb = Some(1024);
        c.mgx.debug_ledger = false;
        c.sweep.param = SweepParam::Channels;
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(
            ExperimentConfig::from_toml(&ExperimentConfig::default().to_toml()).unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn flat_keys_and_switches() {
        let c = ExperimentConfig::from_toml(
            "scheme = \"baseline\"\nworkload = \"alexnet\"\n[baseline]\nregion_mb = 128\ncache_kb = 8\ntree_arity = 8\n[mgx]\nmac_granularity = 512\ndebug_ledger = \"off\"\n",
        )
        .unwrap();
        assert_eq!(c.scheme, Scheme::Baseline);
        assert_eq!(c.baseline.cache_kb, 8);
        assert!(!c.mgx.debug_ledger);
        assert!(
            ExperimentConfig::from_toml("[mgx]\ndebug_ledger = true")
                .unwrap()
                .mgx
                .debug_ledger
        );
        assert!(ExperimentConfig::from_toml("scheme = \"sgx\"").is_err());
        assert!(ExperimentConfig::from_toml("colour = 1").is_err());
    }

    #[test]
    fn region_defaults_to_smallest_cover() {
        let c = ExperimentConfig::default();
        let t = c.build_trace().unwrap();
        assert_eq!(c.sim_config(&t).unwrap().baseline.region_bytes, 128 << 20);
    }
}
