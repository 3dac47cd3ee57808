//! Functional verification and randomized tamper campaigns.
//!
//! A campaign replays the trace once in functional mode. For every trial it
//! clones the simulator right before a randomly chosen load, tampers with
//! off-chip bytes that load consumes, executes the load and records whether
//! the engine rejected it.
#![allow(clippy::single_range_in_vec_init)]

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dram::{AccessOp, RegionMove, SnapshotId, TamperAction, LINE_BYTES};
use crate::mgx::MAC_BYTES;
use crate::perf::{Engine, Scheme, SimConfig, SimError, Simulator};
use crate::workloads::{Trace, TraceEvent};
use crate::EngineMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Campaign {
    Bitflip,
    Replay,
    Relocate,
    Splice,
}

impl Campaign {
    pub const ALL: [Campaign; 4] = [
        Campaign::Bitflip,
        Campaign::Replay,
        Campaign::Relocate,
        Campaign::Splice,
    ];
}

impl fmt::Display for Campaign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Campaign::Bitflip => "bitflip",
            Campaign::Replay => "replay",
            Campaign::Relocate => "relocate",
            Campaign::Splice => "splice",
        })
    }
}

impl FromStr for Campaign {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bitflip" => Ok(Campaign::Bitflip),
            "replay" => Ok(Campaign::Replay),
            "relocate" => Ok(Campaign::Relocate),
            "splice" => Ok(Campaign::Splice),
            _ => Err(SimError::Config(format!(
                "unknown attack `{s}` (expected bitflip, replay, relocate or splice)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialRecord {
    pub trial: u32,
    /// The load the tamper targets.
    pub event: usize,
    pub action: String,
    /// Whether metadata bytes, not only data, were altered.
    pub metadata: bool,
    pub detected: bool,
    pub outcome: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttackReport {
    pub scheme: Scheme,
    pub campaign: Campaign,
    pub trials: u32,
    pub detected: u32,
    /// Trials that altered metadata.
    pub metadata_trials: u32,
    /// Every trial whose tamper went unnoticed.
    pub misses: Vec<TrialRecord>,
}

impl AttackReport {
    pub fn all_detected(&self) -> bool {
        self.detected == self.trials
    }
}

/// One chunk consumed by a load.
#[derive(Clone, Copy, Debug)]
struct Target {
    obj: u32,
    /// Byte range within the object.
    start: u64,
    end: u64,
}

#[derive(Clone, Debug)]
struct Plan {
    trial: u32,
    event: usize,
    target: Target,
    /// Event before which the target is captured for a replay.
    snapshot_before: Option<usize>,
    snapshot: Option<SnapshotId>,
    source: Option<Target>,
    seed: u64,
}

struct ReadSite {
    event: usize,
    chunks: Vec<(Target, Vec<usize>)>,
    written: usize,
}

/// Loads and, per consumed chunk, the stores to it so far; plus the order in
/// which chunks were first written. The memory image right before any of
/// those stores is stale by the time of the load.
fn survey(trace: &Trace) -> (Vec<ReadSite>, Vec<Target>) {
    let mut history: HashMap<(u32, u64), Vec<usize>> = HashMap::new();
    let mut written = Vec::new();
    let mut sites = Vec::new();
    for (i, e) in trace.events.iter().enumerate() {
        let TraceEvent::Access {
            op,
            obj_id,
            offset,
            len,
            ..
        } = *e
        else {
            continue;
        };
        let obj = trace.object(obj_id);
        let extents: Vec<_> = obj.chunk_extents(offset, len).collect();
        match op {
            AccessOp::Write => {
                for (c, cs, ce) in extents {
                    let h = history.entry((obj_id, c)).or_default();
                    if h.is_empty() {
                        written.push(Target {
                            obj: obj_id,
                            start: cs,
                            end: ce,
                        });
                    }
                    h.push(i);
                }
            }
            AccessOp::Read => {
                let chunks = extents
                    .into_iter()
                    .map(|(c, cs, ce)| {
                        let h = history.get(&(obj_id, c)).map(Vec::as_slice).unwrap_or(&[]);
                        (
                            Target {
                                obj: obj_id,
                                start: cs,
                                end: ce,
                            },
                            h.to_vec(),
                        )
                    })
                    .collect();
                sites.push(ReadSite {
                    event: i,
                    chunks,
                    written: written.len(),
                });
            }
        }
    }
    (sites, written)
}

fn plan(trace: &Trace, campaign: Campaign, trials: u32, seed: u64) -> Result<Vec<Plan>, SimError> {
    let (sites, written) = survey(trace);
    let eligible: Vec<&ReadSite> = sites
        .iter()
        .filter(|s| match campaign {
            Campaign::Replay => s.chunks.iter().any(|c| !c.1.is_empty()),
            Campaign::Relocate => s.written >= 2,
            _ => true,
        })
        .collect();
    if eligible.is_empty() && trials > 0 {
        return Err(SimError::Config(format!(
            "trace `{}` offers no load a {campaign} attack can target",
            trace.name
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plans = Vec::with_capacity(trials as usize);
    for trial in 0..trials {
        let site = eligible[rng.random_range(0..eligible.len())];
        let choices: Vec<&(Target, Vec<usize>)> = site
            .chunks
            .iter()
            .filter(|c| campaign != Campaign::Replay || !c.1.is_empty())
            .collect();
        let (target, stores) = choices[rng.random_range(0..choices.len())];
        let snapshot_before =
            (campaign == Campaign::Replay).then(|| stores[rng.random_range(0..stores.len())]);
        let source = (campaign == Campaign::Relocate).then(|| loop {
            let s = written[rng.random_range(0..site.written)];
            if (s.obj, s.start) != (target.obj, target.start) {
                break s;
            }
        });
        plans.push(Plan {
            trial,
            event: site.event,
            target: *target,
            snapshot_before,
            snapshot: None,
            source,
            seed: rng.next_u64(),
        });
    }
    Ok(plans)
}

/// Off-chip bytes an engine reads to serve one chunk, grouped by role.
struct Footprint {
    data: Range<u64>,
    /// Tag bytes that authenticate the data.
    tags: Vec<Range<u64>>,
    /// Counter lines fetched and verified on the way up the tree.
    counters: Vec<Range<u64>>,
    /// Every counter line on the path, fetched or not.
    path: Vec<Range<u64>>,
}

fn footprint(engine: &Engine, trace: &Trace, t: Target) -> Footprint {
    let obj = trace.object(t.obj);
    match engine {
        Engine::Mgx(_) => {
            let mac = obj.mac_addr(t.start / obj.mac_granularity);
            Footprint {
                data: obj.base + t.start..obj.base + t.end,
                tags: vec![mac..mac + MAC_BYTES],
                counters: vec![],
                path: vec![],
            }
        }
        Engine::Baseline(b) => {
            let g = b.geometry();
            let lo = (obj.base + t.start) / LINE_BYTES * LINE_BYTES;
            let hi = (obj.base + t.end).div_ceil(LINE_BYTES) * LINE_BYTES;
            let mut tags = Vec::new();
            let mut counters = Vec::new();
            let mut path = Vec::new();
            for pa in (lo..hi).step_by(LINE_BYTES as usize) {
                let block = g.block_of(pa);
                let line = g.mac_line_addr(block);
                if !b.cache().contains(line) {
                    let at = line + g.mac_slot(block) as u64 * 7;
                    tags.push(at..at + 7);
                }
                let (mut index, _) = g.leaf_of(block);
                let mut level = 0;
                let mut fetched = true;
                loop {
                    let addr = g.counter_line_addr(level, index);
                    let r = addr..addr + LINE_BYTES;
                    fetched &= !b.cache().contains(addr);
                    if fetched && !counters.contains(&r) {
                        counters.push(r.clone());
                    }
                    if !path.contains(&r) {
                        path.push(r);
                    }
                    match g.parent_of(level, index) {
                        Some((p, _)) => {
                            index = p;
                            level += 1;
                        }
                        None => break,
                    }
                }
            }
            Footprint {
                data: lo..hi,
                tags,
                counters,
                path,
            }
        }
        Engine::None(_) => Footprint {
            data: obj.base + t.start..obj.base + t.end,
            tags: vec![],
            counters: vec![],
            path: vec![],
        },
    }
}

fn pick_range(rng: &mut ChaCha8Rng, fp: &Footprint) -> Range<u64> {
    let mut all = vec![fp.data.clone()];
    all.extend(fp.tags.iter().cloned());
    all.extend(fp.counters.iter().cloned());
    // Data is chosen half the time, metadata otherwise.
    if all.len() == 1 || rng.random_bool(0.5) {
        fp.data.clone()
    } else {
        all[rng.random_range(1..all.len())].clone()
    }
}

fn describe(a: &TamperAction) -> String {
    match a {
        TamperAction::BitFlip { addr, bit } => format!("flip bit {bit} at {addr:#x}"),
        TamperAction::Replay { snapshot } => format!("replay snapshot {}", snapshot.0),
        TamperAction::Relocate { moves } => {
            let m: Vec<String> = moves
                .iter()
                .map(|m| format!("{:#x}->{:#x}+{}", m.src, m.dst, m.len))
                .collect();
            format!("relocate {}", m.join(", "))
        }
        TamperAction::Splice { addr, bytes } => {
            format!("splice {} bytes at {addr:#x}", bytes.len())
        }
    }
}

fn build_action(sim: &Simulator<'_>, campaign: Campaign, p: &Plan) -> TamperAction {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let trace = sim.trace();
    let fp = footprint(sim.engine(), trace, p.target);
    match campaign {
        Campaign::Bitflip => {
            let r = pick_range(&mut rng, &fp);
            TamperAction::BitFlip {
                addr: rng.random_range(r),
                bit: rng.random_range(0..8),
            }
        }
        Campaign::Splice => {
            let r = pick_range(&mut rng, &fp);
            let addr = rng.random_range(r.clone());
            let n = rng.random_range(1..=32u64).min(r.end - addr) as usize;
            let current = sim
                .engine()
                .dram()
                .peek(addr, n as u64)
                .expect("footprint is in range");
            let mut bytes = vec![0u8; n];
            while bytes == current {
                rng.fill_bytes(&mut bytes);
            }
            TamperAction::Splice { addr, bytes }
        }
        Campaign::Replay => TamperAction::Replay {
            snapshot: p.snapshot.expect("replay snapshot taken"),
        },
        Campaign::Relocate => {
            let src = footprint(
                sim.engine(),
                trace,
                p.source.expect("relocation source chosen"),
            );
            let len = (fp.data.end - fp.data.start).min(src.data.end - src.data.start);
            let mut moves = vec![RegionMove {
                src: src.data.start,
                dst: fp.data.start,
                len,
            }];
            let blocks = match sim.engine() {
                Engine::Baseline(_) => (len / LINE_BYTES) as usize,
                _ => 1,
            };
            // Carry along the tags the source bytes were stored with.
            let src_tags = tag_addrs(sim, trace, p.source.expect("relocation source chosen"));
            for (s, d) in src_tags
                .iter()
                .zip(&tag_addrs(sim, trace, p.target))
                .take(blocks)
            {
                moves.push(RegionMove {
                    src: s.start,
                    dst: d.start,
                    len: s.end - s.start,
                });
            }
            TamperAction::Relocate { moves }
        }
    }
}

/// Tag locations for every block or chunk of a target, resident or not.
fn tag_addrs(sim: &Simulator<'_>, trace: &Trace, t: Target) -> Vec<Range<u64>> {
    let obj = trace.object(t.obj);
    match sim.engine() {
        Engine::Baseline(b) => {
            let g = b.geometry();
            let lo = (obj.base + t.start) / LINE_BYTES * LINE_BYTES;
            let hi = (obj.base + t.end).div_ceil(LINE_BYTES) * LINE_BYTES;
            (lo..hi)
                .step_by(LINE_BYTES as usize)
                .map(|pa| {
                    let block = g.block_of(pa);
                    let at = g.mac_line_addr(block) + g.mac_slot(block) as u64 * 7;
                    at..at + 7
                })
                .collect()
        }
        _ => {
            let mac = obj.mac_addr(t.start / obj.mac_granularity);
            vec![mac..mac + MAC_BYTES]
        }
    }
}

/// Regions a replay restores: the data with all of its metadata.
fn replay_region(sim: &Simulator<'_>, t: Target) -> Vec<Range<u64>> {
    let fp = footprint(sim.engine(), sim.trace(), t);
    let mut r = vec![fp.data];
    r.extend(tag_addrs(sim, sim.trace(), t));
    r.extend(fp.path);
    r
}

fn ranges_of(action: &TamperAction, sim: &Simulator<'_>, plan: &Plan) -> Vec<Range<u64>> {
    match action {
        TamperAction::BitFlip { addr, .. } => vec![*addr..addr + 1],
        TamperAction::Splice { addr, bytes } => vec![*addr..addr + bytes.len() as u64],
        TamperAction::Relocate { moves } => moves.iter().map(|m| m.dst..m.dst + m.len).collect(),
        TamperAction::Replay { .. } => replay_region(sim, plan.target),
    }
}

fn contents(sim: &Simulator<'_>, ranges: &[Range<u64>]) -> Vec<Vec<u8>> {
    ranges
        .iter()
        .map(|r| {
            sim.engine()
                .dram()
                .peek(r.start, r.end - r.start)
                .expect("in range")
        })
        .collect()
}

fn attempt(master: &Simulator<'_>, campaign: Campaign, p: &Plan) -> Result<TrialRecord, SimError> {
    let mut sim = master.clone();
    let action = build_action(&sim, campaign, p);
    let ranges = ranges_of(&action, &sim, p);
    let before = contents(&sim, &ranges);
    sim.engine_mut()
        .dram_mut()
        .inject(&action)
        .map_err(|e| SimError::Config(e.to_string()))?;
    let after = contents(&sim, &ranges);
    if after == before {
        return Err(SimError::Config(format!(
            "trial {}: `{}` left memory unchanged",
            p.trial,
            describe(&action)
        )));
    }
    let data = footprint(sim.engine(), sim.trace(), p.target).data;
    let metadata = ranges
        .iter()
        .zip(before.iter().zip(&after))
        .any(|(r, (b, a))| b != a && (r.start < data.start || r.end > data.end));
    let (detected, outcome) = match sim.step() {
        Err(e) if e.is_tamper() => (true, e.to_string()),
        Err(e) => (false, e.to_string()),
        Ok(_) => (false, "load accepted".to_string()),
    };
    Ok(TrialRecord {
        trial: p.trial,
        event: p.event,
        action: describe(&action),
        metadata,
        detected,
        outcome,
    })
}

/// Runs `trials` randomized tamper attempts of one class. Against the
/// unprotected scheme every attempt is expected to go unnoticed.
pub fn run_campaign(
    trace: &Trace,
    scheme: Scheme,
    cfg: &SimConfig,
    campaign: Campaign,
    trials: u32,
    seed: u64,
) -> Result<AttackReport, SimError> {
    let mut plans = plan(trace, campaign, trials, seed)?;
    plans.sort_by_key(|p| p.event);
    let mut snapshots: Vec<(usize, usize)> = plans
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.snapshot_before.map(|s| (s, i)))
        .collect();
    snapshots.sort_unstable();
    let mut master = Simulator::new(trace, scheme, cfg, EngineMode::Functional)?;
    let mut report = AttackReport {
        scheme,
        campaign,
        trials,
        detected: 0,
        metadata_trials: 0,
        misses: Vec::new(),
    };
    let (mut next_plan, mut next_snap) = (0, 0);
    while next_plan < plans.len() {
        let at = master.position();
        while next_snap < snapshots.len() && snapshots[next_snap].0 == at {
            let i = snapshots[next_snap].1;
            let region = replay_region(&master, plans[i].target);
            let id = master
                .engine_mut()
                .dram_mut()
                .snapshot(&region)
                .map_err(|e| SimError::Config(e.to_string()))?;
            plans[i].snapshot = Some(id);
            next_snap += 1;
        }
        while next_plan < plans.len() && plans[next_plan].event == at {
            let rec = attempt(&master, campaign, &plans[next_plan])?;
            report.metadata_trials += rec.metadata as u32;
            if rec.detected {
                report.detected += 1;
            } else {
                report.misses.push(rec);
            }
            next_plan += 1;
        }
        if next_plan < plans.len() && master.step()?.is_none() {
            break;
        }
    }
    report.misses.sort_by_key(|m| m.trial);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifyReport {
    pub scheme: Scheme,
    pub events: usize,
    pub loads: u64,
    /// Distinct (cipher block, version) pairs in the write ledger.
    pub ledger_pairs: Option<u64>,
}

/// Replays the trace with real cryptography, checking every load against
/// the payload its store wrote. MgX runs keep the write ledger on.
pub fn verify(trace: &Trace, scheme: Scheme, cfg: &SimConfig) -> Result<VerifyReport, SimError> {
    let mut cfg = cfg.clone();
    cfg.mgx.debug_ledger = true;
    let mut sim = Simulator::new(trace, scheme, &cfg, EngineMode::Functional)?;
    sim.run()?;
    let ledger_pairs = match sim.engine() {
        Engine::Mgx(m) => m.ledger().map(|l| l.pairs()),
        _ => None,
    };
    Ok(VerifyReport {
        scheme,
        events: trace.events.len(),
        loads: sim.loads_checked(),
        ledger_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workloads::{WorkloadParams, WorkloadSpec};

    fn tiny() -> Trace {
        let p = WorkloadParams {
            inputs: 3,
            ..Default::default()
        };
        "tiny".parse::<WorkloadSpec>().unwrap().build(&p).unwrap()
    }

    #[test]
    fn campaigns_detect_everything() {
        let t = tiny();
        for scheme in [Scheme::Baseline, Scheme::Mgx] {
            for c in Campaign::ALL {
                let r = run_campaign(&t, scheme, &SimConfig::default(), c, 50, 7).unwrap();
                assert!(r.all_detected(), "{scheme} {c}: {:?}", r.misses.first());
                if c != Campaign::Replay || scheme == Scheme::Baseline {
                    assert!(r.metadata_trials > 0, "{scheme} {c} never touched metadata");
                }
            }
        }
    }

    #[test]
    fn zero_trials_is_vacuous() {
        let r = run_campaign(
            &tiny(),
            Scheme::Mgx,
            &SimConfig::default(),
            Campaign::Replay,
            0,
            1,
        )
        .unwrap();
        assert_eq!((r.trials, r.detected), (0, 0));
        assert!(r.all_detected());
    }

    #[test]
    fn unprotected_memory_serves_every_tamper() {
        let t = tiny();
        for c in Campaign::ALL {
            let r = run_campaign(&t, Scheme::None, &SimConfig::default(), c, 50, 3).unwrap();
            assert_eq!(r.detected, 0, "{c}");
            assert!(
                r.misses
                    .iter()
                    .all(|m| m.outcome.contains("payload mismatch")),
                "{c}: {:?}",
                r.misses[0]
            );
        }
    }

    #[test]
    fn verify_counts_loads() {
        let t = tiny();
        let r = verify(&t, Scheme::Mgx, &SimConfig::default()).unwrap();
        assert_eq!(
            r.loads,
            t.accesses().filter(|a| a.0 == AccessOp::Read).count() as u64
        );
        assert!(r.ledger_pairs.unwrap() > 0);
    }
}
