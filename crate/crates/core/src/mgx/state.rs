use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::MgxError;

pub const CTR_I_BITS: u32 = 56;
pub const VID_BITS: u32 = 8;
pub const MAX_VID: u32 = (1 << VID_BITS) - 1;

const CTR_I_LIMIT: u64 = 1 << CTR_I_BITS;
const LOW32: u64 = u32::MAX as u64;

/// On-chip counters from which every version number is derived.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MgxState {
    pub ctr_i: u64,
    pub ctr_w: u64,
    pub ctr_genome: u64,
    pub ctr_query: u64,
    /// Key generation; bumped whenever `ctr_i` wraps.
    pub epoch: u64,
}

/// Which counter an `Advance` step increments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Counter {
    Input,
    Model,
    Genome,
    Query,
}

impl MgxState {
    pub fn getvn_w(&self) -> u64 {
        self.ctr_w
    }

    pub fn getvn_f(&self, vid: u32) -> Result<u64, MgxError> {
        if vid == 0 || vid > MAX_VID {
            return Err(MgxError::InvalidVid(vid));
        }
        Ok(self.ctr_i << VID_BITS | vid as u64)
    }

    /// Frame buffers: low 32 bits of the bitstream counter, then the frame number.
    pub fn getvn_frame(&self, frame: u32) -> u64 {
        (self.ctr_i & LOW32) << 32 | frame as u64
    }

    pub fn getvn_genome(&self) -> u64 {
        self.ctr_genome
    }

    pub fn getvn_query(&self) -> u64 {
        (self.ctr_genome & LOW32) << 32 | (self.ctr_query & LOW32)
    }

    /// Increments the input counter. Returns true when it wrapped and forced
    /// a new key epoch.
    pub fn updates_i(&mut self) -> bool {
        self.ctr_i += 1;
        if self.ctr_i >= CTR_I_LIMIT {
            self.ctr_i = 0;
            self.epoch += 1;
            return true;
        }
        false
    }

    pub fn updates_w(&mut self) {
        self.ctr_w += 1;
    }

    pub fn advance(&mut self, counter: Counter) -> bool {
        match counter {
            Counter::Input => return self.updates_i(),
            Counter::Model => self.updates_w(),
            Counter::Genome => self.ctr_genome += 1,
            Counter::Query => self.ctr_query += 1,
        }
        false
    }

    pub fn resolve(&self, src: VnSource) -> Result<u64, MgxError> {
        Ok(match src {
            VnSource::Weights => self.getvn_w(),
            VnSource::WeightsNext => self.getvn_w() + 1,
            VnSource::Feature(vid) => self.getvn_f(vid as u32)?,
            VnSource::Frame(f) => self.getvn_frame(f),
            VnSource::Genome => self.getvn_genome(),
            VnSource::Query => self.getvn_query(),
        })
    }
}

/// Symbolic version number attached to a trace event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VnSource {
    Weights,
    /// The weight version the next model update will publish.
    WeightsNext,
    Feature(u8),
    Frame(u32),
    Genome,
    Query,
}

impl fmt::Display for VnSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VnSource::Weights => f.write_str("weights"),
            VnSource::WeightsNext => f.write_str("weights_next"),
            VnSource::Feature(v) => write!(f, "feature:{v}"),
            VnSource::Frame(n) => write!(f, "frame:{n}"),
            VnSource::Genome => f.write_str("genome"),
            VnSource::Query => f.write_str("query"),
        }
    }
}

impl FromStr for VnSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("unknown vn source `{s}`");
        Ok(match s.split_once(':') {
            None => match s {
                "weights" => VnSource::Weights,
                "weights_next" => VnSource::WeightsNext,
                "genome" => VnSource::Genome,
                "query" => VnSource::Query,
                _ => return Err(bad()),
            },
            Some(("feature", v)) => VnSource::Feature(v.parse().map_err(|_| bad())?),
            Some(("frame", v)) => VnSource::Frame(v.parse().map_err(|_| bad())?),
            Some(_) => return Err(bad()),
        })
    }
}

/// The version-number scheme of one accelerator class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VnGenerator {
    Dnn,
    H264,
    Gact,
}

impl VnGenerator {
    pub fn accepts(self, src: VnSource) -> bool {
        use VnSource::*;
        match self {
            VnGenerator::Dnn => matches!(src, Weights | WeightsNext | Feature(_)),
            VnGenerator::H264 => matches!(src, Frame(_)),
            VnGenerator::Gact => matches!(src, Genome | Query),
        }
    }

    pub fn get_vn(self, state: &MgxState, src: VnSource) -> Result<u64, MgxError> {
        if !self.accepts(src) {
            return Err(MgxError::Config(format!(
                "{self:?} accelerator cannot derive `{src}`"
            )));
        }
        state.resolve(src)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_layout() {
        let mut s = MgxState::default();
        assert_eq!(s.getvn_f(1).unwrap(), 1);
        s.ctr_i = 5;
        assert_eq!(s.getvn_f(3).unwrap(), 1283);
        assert_eq!(s.getvn_f(0), Err(MgxError::InvalidVid(0)));
        assert_eq!(s.getvn_f(256), Err(MgxError::InvalidVid(256)));
    }

    #[test]
    fn weight_counter() {
        let mut s = MgxState::default();
        assert_eq!(s.getvn_w(), 0);
        s.updates_w();
        s.updates_w();
        assert_eq!(s.getvn_w(), 2);
        assert_eq!(s.ctr_i, 0);
        s.updates_i();
        assert_eq!((s.ctr_i, s.ctr_w), (1, 2));
    }

    #[test]
    fn input_counter_wrap_starts_new_epoch() {
        let mut s = MgxState {
            ctr_i: CTR_I_LIMIT - 1,
            ..Default::default()
        };
        assert!(s.updates_i());
        assert_eq!((s.ctr_i, s.epoch), (0, 1));
        assert!(!s.updates_i());
    }

    #[test]
    fn alignment_layouts() {
        let s = MgxState {
            ctr_genome: 1,
            ctr_query: 1,
            ctr_i: 2,
            ..Default::default()
        };
        assert_eq!(s.getvn_query(), 1 << 32 | 1);
        assert_eq!(s.getvn_genome(), 1);
        assert_eq!(s.getvn_frame(7), 2 << 32 | 7);
    }

    #[test]
    fn vn_source_text_round_trip() {
        for src in [
            VnSource::Weights,
            VnSource::WeightsNext,
            VnSource::Feature(42),
            VnSource::Frame(9),
            VnSource::Genome,
            VnSource::Query,
        ] {
            assert_eq!(src.to_string().parse::<VnSource>().unwrap(), src);
        }
        assert!("feature:300".parse::<VnSource>().is_err());
        assert!("bogus".parse::<VnSource>().is_err());
    }

    #[test]
    fn generator_restricts_sources() {
        let s = MgxState::default();
        assert!(VnGenerator::H264.get_vn(&s, VnSource::Weights).is_err());
        assert_eq!(VnGenerator::Gact.get_vn(&s, VnSource::Genome).unwrap(), 0);
    }
}
