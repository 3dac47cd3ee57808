use std::collections::HashMap;

use super::{Trace, TraceEvent};
use crate::dram::AccessOp;
use crate::mgx::{MgxState, WriteLedger};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub writes: u64,
    pub reads: u64,
    /// Distinct (cipher block, version) pairs written.
    pub ledger_pairs: u64,
    /// Writes that reused a (cipher block, version) pair.
    pub reused: u64,
    /// Reads whose version or extent differs from the covering store.
    pub mismatched_reads: u64,
    pub first_problem: Option<String>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.reused == 0 && self.mismatched_reads == 0
    }
}

/// Resolves every version number in the trace and checks that no write
/// reuses a version at an address and that every read names the version and
/// chunk extent of the store it observes.
pub fn audit(trace: &Trace) -> AuditReport {
    let mut state = MgxState::default();
    let mut ledger = WriteLedger::default();
    let mut chunks: HashMap<(u32, u64), (u64, u64)> = HashMap::new();
    let mut rep = AuditReport::default();
    let note = |rep: &mut AuditReport, msg: String| {
        if rep.first_problem.is_none() {
            rep.first_problem = Some(msg);
        }
    };
    for (i, e) in trace.events.iter().enumerate() {
        let (op, obj_id, src, offset, len) = match *e {
            TraceEvent::Advance { counter, .. } => {
                if state.advance(counter) {
                    ledger.reset();
                    chunks.clear();
                }
                continue;
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
        let obj = trace.object(obj_id);
        let vn = match state.resolve(src) {
            Ok(v) => v,
            Err(err) => {
                rep.mismatched_reads += 1;
                note(&mut rep, format!("event {i}: {err}"));
                continue;
            }
        };
        let k = obj.mac_granularity;
        if offset % k != 0 || offset + len > obj.size {
            rep.mismatched_reads += 1;
            note(
                &mut rep,
                format!("event {i}: access {offset}+{len} misfits object {obj_id}"),
            );
            continue;
        }
        match op {
            AccessOp::Write => {
                rep.writes += 1;
                let pa = obj.base + offset;
                if let Err(at) = ledger.record(pa..pa + len, vn) {
                    rep.reused += 1;
                    note(&mut rep, format!("event {i}: vn {vn:#x} reused at {at:#x}"));
                }
                for (c, cs, ce) in obj.chunk_extents(offset, len) {
                    chunks.insert((obj_id, c), (vn, ce - cs));
                }
            }
            AccessOp::Read => {
                rep.reads += 1;
                for (c, cs, ce) in obj.chunk_extents(offset, len) {
                    match chunks.get(&(obj_id, c)) {
                        Some(&(svn, slen)) if svn == vn && slen == ce - cs => {}
                        found => {
                            rep.mismatched_reads += 1;
                            note(
                                &mut rep,
                                format!(
                                    "event {i}: read of `{}` chunk {c} with vn {vn:#x} sees {found:?}",
                                    trace.objects[obj_id as usize].name
                                ),
                            );
                            break;
                        }
                    }
                }
            }
        }
    }
    rep.ledger_pairs = ledger.pairs();
    rep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workloads::{cnn_inference, NetworkGraph};

    #[test]
    fn clean_trace_and_injected_fault() {
        let mut t = cnn_inference(&NetworkGraph::preset("tiny").unwrap(), 2, 1024).unwrap();
        let r = audit(&t);
        assert!(r.is_clean(), "{r:?}");
        assert!(r.writes > 0 && r.reads > 0);
        // Turn the last read into a stale-version read.
        let last = t
            .events
            .iter()
            .rposition(|e| {
                matches!(
                    e,
                    TraceEvent::Access {
                        op: AccessOp::Read,
                        ..
                    }
                )
            })
            .unwrap();
        if let TraceEvent::Access { vn_source, .. } = &mut t.events[last] {
            *vn_source = crate::mgx::VnSource::Feature(200);
        }
        let r = audit(&t);
        assert_eq!(r.mismatched_reads, 1);
        assert!(r.first_problem.is_some());
    }

    #[test]
    fn every_generator_is_clean() {
        use crate::workloads::{WorkloadParams, WorkloadSpec};
        let p = WorkloadParams {
            inputs: 2,
            iterations: 2,
            timesteps: 3,
            ..Default::default()
        };
        for w in [
            "lenet",
            "tiny:training",
            "googlenet",
            "resnet50:training",
            "alexnet:training",
            "rnn",
            "rnn:training",
            "pruned",
            "pruned:alexnet",
            "h264",
            "gact",
        ] {
            let t = w.parse::<WorkloadSpec>().unwrap().build(&p).unwrap();
            let r = audit(&t);
            assert!(r.is_clean(), "{w}: {r:?}");
        }
    }
}
