use std::collections::HashMap;
use std::ops::Range;

use rangemap::RangeSet;

use crate::crypto::CIPHER_BLOCK;

/// Every (cipher block, version number) pair written under the current key.
#[derive(Clone, Debug, Default)]
pub struct WriteLedger {
    by_vn: HashMap<u64, RangeSet<u64>>,
    pairs: u64,
}

impl WriteLedger {
    /// Cipher blocks touched by a byte range.
    fn blocks(pa: Range<u64>) -> Range<u64> {
        pa.start / CIPHER_BLOCK..pa.end.div_ceil(CIPHER_BLOCK)
    }

    /// Records a write. On reuse returns the first address already written
    /// under `vn` and leaves the ledger unchanged.
    pub fn record(&mut self, pa: Range<u64>, vn: u64) -> Result<(), u64> {
        if pa.is_empty() {
            return Ok(());
        }
        let blocks = Self::blocks(pa);
        let set = self.by_vn.entry(vn).or_default();
        if let Some(hit) = set.overlapping(&blocks).next() {
            return Err(hit.start.max(blocks.start) * CIPHER_BLOCK);
        }
        self.pairs += blocks.end - blocks.start;
        set.insert(blocks);
        Ok(())
    }

    pub fn contains(&self, pa: u64, vn: u64) -> bool {
        self.by_vn
            .get(&vn)
            .is_some_and(|s| s.contains(&(pa / CIPHER_BLOCK)))
    }

    /// Distinct (block, vn) pairs recorded.
    pub fn pairs(&self) -> u64 {
        self.pairs
    }

    pub fn reset(&mut self) {
        self.by_vn.clear();
        self.pairs = 0;
    }
}

/// What the most recent store left in each chunk, for checking that loads
/// ask for the version and extent that was written.
#[derive(Clone, Debug, Default)]
pub struct ShadowBook {
    chunks: HashMap<(u32, u64), (u64, u64)>,
}

impl ShadowBook {
    pub fn stored(&mut self, obj_id: u32, chunk: u64, vn: u64, len: u64) {
        self.chunks.insert((obj_id, chunk), (vn, len));
    }

    pub fn lookup(&self, obj_id: u32, chunk: u64) -> Option<(u64, u64)> {
        self.chunks.get(&(obj_id, chunk)).copied()
    }

    pub fn clear(&mut self) {
        self.chunks.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reuse_is_reported_at_block_granularity() {
        let mut l = WriteLedger::default();
        l.record(0..64, 1).unwrap();
        l.record(0..64, 2).unwrap();
        l.record(64..70, 1).unwrap();
        // Same tail cipher block, same vn.
        assert_eq!(l.record(72..80, 1), Err(64));
        assert_eq!(l.record(32..200, 2), Err(32));
        assert_eq!(l.pairs(), 4 + 4 + 1);
        assert!(l.contains(70, 1));
        assert!(!l.contains(80, 1));
        l.reset();
        l.record(0..64, 1).unwrap();
    }

    #[test]
    fn empty_range_is_free() {
        let mut l = WriteLedger::default();
        l.record(5..5, 0).unwrap();
        assert_eq!(l.pairs(), 0);
    }
}
