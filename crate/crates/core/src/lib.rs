//! Secure-memory simulation for accelerators: a general-purpose counter-tree
//! protection engine, an application-specific version-number scheme, the
//! workloads that drive them, and a trace-driven performance model.

pub mod baseline;
pub mod config;
pub mod crypto;
pub mod dram;
pub mod harness;
pub mod mgx;
pub mod perf;
pub mod workloads;

/// Whether an engine runs real cryptography over stored bytes or only
/// reproduces the DRAM transaction stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineMode {
    #[default]
    Functional,
    Accounting,
}
