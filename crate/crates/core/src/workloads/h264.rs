use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Phase, Trace, TraceBuilder, WorkloadError};
use crate::dram::AccessOp;
use crate::mgx::{Counter, VnGenerator, VnSource};

/// QCIF 4:2:0 frame: 176x144 luma plus two quarter-size chroma planes.
pub const FRAME_BYTES: u64 = 176 * 144 * 3 / 2;
/// One row of 16x16 macroblocks.
pub const ROW_BYTES: u64 = FRAME_BYTES / 9;
/// Largest divisor of the row size that is a whole number of cipher blocks
/// and close to 1 KiB.
pub const FRAME_MAC_GRANULARITY: u64 = ROW_BYTES / 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct H264Params {
    /// Frame types in display order.
    pub pattern: String,
    pub buffers: usize,
    pub streams: u32,
    /// Reference windows fetched per macroblock row and reference.
    pub reads_per_row: u32,
    pub window_chunks: u64,
}

impl Default for H264Params {
    fn default() -> Self {
        Self {
            pattern: "IBPB".repeat(8),
            buffers: 3,
            streams: 1,
            reads_per_row: 2,
            window_chunks: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeStep {
    pub frame: u32,
    pub refs: Vec<u32>,
}

/// Decode order and reference frames. Anchors (I, P) decode in display
/// order; the B frames between two anchors follow the later anchor and read
/// both. P frames read the previous anchor; trailing B frames read only it.
pub fn decode_order(pattern: &str) -> Result<Vec<DecodeStep>, WorkloadError> {
    let kinds: Vec<char> = pattern.chars().collect();
    if kinds.is_empty() {
        return Err(WorkloadError::Config("empty frame pattern".into()));
    }
    if let Some(c) = kinds.iter().find(|c| !matches!(c, 'I' | 'P' | 'B')) {
        return Err(WorkloadError::Config(format!("unknown frame type `{c}`")));
    }
    if kinds[0] != 'I' {
        return Err(WorkloadError::Config(
            "pattern must start with an I frame".into(),
        ));
    }
    let n = kinds.len() as u32;
    let anchors: Vec<u32> = (0..n).filter(|&f| kinds[f as usize] != 'B').collect();
    let mut steps = Vec::new();
    let mut prev: Option<u32> = None;
    for &a in &anchors {
        let refs = match (kinds[a as usize], prev) {
            ('P', Some(p)) => vec![p],
            _ => vec![],
        };
        steps.push(DecodeStep { frame: a, refs });
        if let Some(p) = prev {
            for b in p + 1..a {
                steps.push(DecodeStep {
                    frame: b,
                    refs: vec![p, a],
                });
            }
        }
        prev = Some(a);
    }
    let last = prev.expect("first frame is an anchor");
    for b in last + 1..n {
        steps.push(DecodeStep {
            frame: b,
            refs: vec![last],
        });
    }
    Ok(steps)
}

/// Frame decoding into a small pool of reconstructed-frame buffers. Each
/// frame is written once, one macroblock row at a time, under the version
/// number (bitstream counter, frame number). Motion compensation reads
/// random chunk-aligned windows from the reference frames.
pub fn h264(p: &H264Params, seed: u64) -> Result<Trace, WorkloadError> {
    let steps = decode_order(&p.pattern)?;
    if p.buffers == 0 || p.window_chunks == 0 {
        return Err(WorkloadError::Config(
            "need at least one buffer and window chunk".into(),
        ));
    }
    let k = FRAME_MAC_GRANULARITY;
    let chunks = FRAME_BYTES / k;
    if p.window_chunks > chunks {
        return Err(WorkloadError::Config(
            "reference window larger than a frame".into(),
        ));
    }
    let mut b = TraceBuilder::new("h264", VnGenerator::H264, k)?;
    let bufs: Vec<u32> = (0..p.buffers)
        .map(|i| b.object(format!("frame_buffer{i}"), FRAME_BYTES))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = p.pattern.len();
    for s in 0..p.streams {
        let grp = b.group(format!("s{s}:bitstream"), 0, Phase::Host);
        b.advance(Counter::Input, grp);
        let mut holder: Vec<Option<u32>> = vec![None; p.buffers];
        let mut located = vec![usize::MAX; frames];
        let mut next = 0usize;
        for (i, step) in steps.iter().enumerate() {
            // A buffer is free once no later step references its frame.
            let live = |f: u32| steps[i..].iter().any(|st| st.refs.contains(&f));
            let slot = (0..p.buffers)
                .map(|d| (next + d) % p.buffers)
                .find(|&c| holder[c].is_none_or(|f| !live(f)))
                .ok_or_else(|| {
                    WorkloadError::Config(format!(
                        "{} frame buffers cannot hold the live references",
                        p.buffers
                    ))
                })?;
            next = (slot + 1) % p.buffers;
            holder[slot] = Some(step.frame);
            located[step.frame as usize] = slot;
            let grp = b.group(
                format!("s{s}:f{}", step.frame),
                FRAME_BYTES * 16,
                Phase::Measured,
            );
            for row in 0..FRAME_BYTES / ROW_BYTES {
                for &r in &step.refs {
                    for _ in 0..p.reads_per_row {
                        let at = rng.random_range(0..=chunks - p.window_chunks) * k;
                        b.access(
                            AccessOp::Read,
                            bufs[located[r as usize]],
                            VnSource::Frame(r),
                            at,
                            p.window_chunks * k,
                            grp,
                        );
                    }
                }
                b.access(
                    AccessOp::Write,
                    bufs[slot],
                    VnSource::Frame(step.frame),
                    row * ROW_BYTES,
                    ROW_BYTES,
                    grp,
                );
            }
        }
    }
    Ok(b.finish())
}
