use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Phase, Trace, TraceBuilder, WorkloadError};
use crate::dram::AccessOp;
use crate::mgx::{Counter, VnGenerator, VnSource, DEFAULT_MAC_GRANULARITY};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GactParams {
    pub genomes: u32,
    pub batches: u32,
    pub queries_per_batch: u32,
    pub reference_bytes: u64,
    pub seed_table_bytes: u64,
    pub position_table_bytes: u64,
    pub query_bytes: u64,
    pub traceback_bytes: u64,
    /// Seed lookups (seed pointer, positions, reference window) per query.
    pub lookups_per_query: u32,
    pub k: u64,
}

impl Default for GactParams {
    fn default() -> Self {
        Self {
            genomes: 1,
            batches: 2,
            queries_per_batch: 8,
            reference_bytes: 1 << 20,
            seed_table_bytes: 256 << 10,
            position_table_bytes: 1 << 20,
            query_bytes: 4 << 10,
            traceback_bytes: 16 << 10,
            lookups_per_query: 16,
            k: DEFAULT_MAC_GRANULARITY,
        }
    }
}

/// Read alignment: reference tables are written once per genome, queries
/// once per batch, and each query's traceback pointers are written
/// sequentially into its own slice of the traceback buffer.
pub fn gact(p: &GactParams, seed: u64) -> Result<Trace, WorkloadError> {
    let k = p.k;
    for (name, v) in [
        ("reference_bytes", p.reference_bytes),
        ("seed_table_bytes", p.seed_table_bytes),
        ("position_table_bytes", p.position_table_bytes),
        ("query_bytes", p.query_bytes),
        ("traceback_bytes", p.traceback_bytes),
    ] {
        if v == 0 || v % k != 0 {
            return Err(WorkloadError::Config(format!(
                "{name} = {v} must be a positive multiple of {k}"
            )));
        }
    }
    if p.reference_bytes < 2 * k {
        return Err(WorkloadError::Config(
            "reference must span at least two chunks".into(),
        ));
    }
    let mut b = TraceBuilder::new("gact", VnGenerator::Gact, k)?;
    let reference = b.object("reference", p.reference_bytes);
    let seeds = b.object("seed_pointers", p.seed_table_bytes);
    let positions = b.object("positions", p.position_table_bytes);
    let queries = b.object("queries", p.query_bytes * p.queries_per_batch as u64);
    let traceback = b.object("traceback", p.traceback_bytes * p.queries_per_batch as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick =
        |rng: &mut ChaCha8Rng, size: u64, chunks: u64| rng.random_range(0..=size / k - chunks) * k;
    for gi in 0..p.genomes {
        let grp = b.group(format!("g{gi}:load"), 0, Phase::Host);
        b.advance(Counter::Genome, grp);
        for obj in [reference, seeds, positions] {
            b.write(obj, VnSource::Genome, grp);
        }
        for bi in 0..p.batches {
            let grp = b.group(format!("g{gi}b{bi}:load"), 0, Phase::Host);
            b.advance(Counter::Query, grp);
            if p.queries_per_batch > 0 {
                b.write(queries, VnSource::Query, grp);
            }
            for q in 0..p.queries_per_batch as u64 {
                let work = p.query_bytes * p.traceback_bytes / 16;
                let grp = b.group(format!("g{gi}b{bi}q{q}"), work, Phase::Measured);
                b.access(
                    AccessOp::Read,
                    queries,
                    VnSource::Query,
                    q * p.query_bytes,
                    p.query_bytes,
                    grp,
                );
                for _ in 0..p.lookups_per_query {
                    let at = pick(&mut rng, p.seed_table_bytes, 1);
                    b.access(AccessOp::Read, seeds, VnSource::Genome, at, k, grp);
                    let at = pick(&mut rng, p.position_table_bytes, 1);
                    b.access(AccessOp::Read, positions, VnSource::Genome, at, k, grp);
                    let at = pick(&mut rng, p.reference_bytes, 2);
                    b.access(AccessOp::Read, reference, VnSource::Genome, at, 2 * k, grp);
                }
                for t in 0..p.traceback_bytes / k {
                    let at = q * p.traceback_bytes + t * k;
                    b.access(AccessOp::Write, traceback, VnSource::Query, at, k, grp);
                }
            }
        }
    }
    Ok(b.finish())
}
