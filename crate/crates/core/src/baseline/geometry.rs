use crate::dram::LINE_BYTES;

/// Data MAC slots per 64-byte MAC line.
pub const MACS_PER_LINE: u64 = 8;

const META_ALIGN: u64 = 4096;

fn align_up(x: u64, a: u64) -> u64 {
    x.div_ceil(a) * a
}

/// Address map of the baseline metadata.
///
/// Level 0 holds one counter line per `arity` data blocks. Each level above
/// holds one counter line per `arity` lines of the level below; the level
/// with at most `arity` lines is guarded by the on-chip root. Data MAC lines
/// pack eight tags each and sit right after the protected region, followed
/// by the counter levels from the leaves upward.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeGeometry {
    base: u64,
    size: u64,
    arity: u64,
    mac_base: u64,
    level_base: Vec<u64>,
    level_count: Vec<u64>,
    end: u64,
}

impl TreeGeometry {
    pub fn new(base: u64, size: u64, arity: u64) -> Self {
        assert!(arity >= 2 && size >= LINE_BYTES);
        let blocks = size.div_ceil(LINE_BYTES);
        let mac_base = align_up(base + size, META_ALIGN);
        let mut addr = align_up(
            mac_base + blocks.div_ceil(MACS_PER_LINE) * LINE_BYTES,
            META_ALIGN,
        );
        let mut count = blocks.div_ceil(arity);
        let mut level_base = Vec::new();
        let mut level_count = Vec::new();
        loop {
            level_base.push(addr);
            level_count.push(count);
            addr += count * LINE_BYTES;
            if count <= arity {
                break;
            }
            count = count.div_ceil(arity);
        }
        Self {
            base,
            size,
            arity,
            mac_base,
            level_base,
            level_count,
            end: addr,
        }
    }

    pub fn arity(&self) -> u64 {
        self.arity
    }

    pub fn region(&self) -> (u64, u64) {
        (self.base, self.size)
    }

    /// Counter levels stored off-chip.
    pub fn levels(&self) -> usize {
        self.level_count.len()
    }

    pub fn level_lines(&self, level: usize) -> u64 {
        self.level_count[level]
    }

    /// Number of counters held by the on-chip root.
    pub fn root_len(&self) -> u64 {
        *self.level_count.last().unwrap()
    }

    /// First address past all metadata.
    pub fn end(&self) -> u64 {
        self.end
    }

    pub fn contains(&self, pa: u64) -> bool {
        pa >= self.base && pa < self.base + self.size
    }

    pub fn block_of(&self, pa: u64) -> u64 {
        (pa - self.base) / LINE_BYTES
    }

    pub fn block_addr(&self, block: u64) -> u64 {
        self.base + block * LINE_BYTES
    }

    pub fn leaf_of(&self, block: u64) -> (u64, usize) {
        (block / self.arity, (block % self.arity) as usize)
    }

    /// Parent line index and counter slot, or `None` when guarded by the root.
    pub fn parent_of(&self, level: usize, index: u64) -> Option<(u64, usize)> {
        if level + 1 == self.levels() {
            None
        } else {
            Some((index / self.arity, (index % self.arity) as usize))
        }
    }

    pub fn counter_line_addr(&self, level: usize, index: u64) -> u64 {
        debug_assert!(index < self.level_count[level]);
        self.level_base[level] + index * LINE_BYTES
    }

    pub fn mac_line_addr(&self, block: u64) -> u64 {
        self.mac_base + (block / MACS_PER_LINE) * LINE_BYTES
    }

    pub fn mac_slot(&self, block: u64) -> usize {
        (block % MACS_PER_LINE) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_counts_for_standard_regions() {
        // 8-ary over 64-byte blocks: 2^21 blocks in 128 MiB.
        let g = TreeGeometry::new(0, 128 << 20, 8);
        assert_eq!(g.levels(), 6);
        assert_eq!(g.level_lines(0), 1 << 18);
        assert_eq!(g.root_len(), 8);
        assert_eq!(TreeGeometry::new(0, 1 << 30, 8).levels(), 7);
        assert_eq!(TreeGeometry::new(0, 8 << 30, 8).levels(), 8);
    }

    #[test]
    fn tiny_region_has_single_level() {
        let g = TreeGeometry::new(0, 512, 8);
        assert_eq!(g.levels(), 1);
        assert_eq!(g.root_len(), 1);
        assert_eq!(g.parent_of(0, 0), None);
    }

    #[test]
    fn metadata_does_not_overlap_region() {
        let g = TreeGeometry::new(0, 1 << 20, 8);
        assert!(g.mac_line_addr(0) >= 1 << 20);
        let last_mac = g.mac_line_addr((1 << 20) / 64 - 1);
        assert!(g.counter_line_addr(0, 0) > last_mac);
        let top = g.levels() - 1;
        assert!(g.counter_line_addr(top, g.root_len() - 1) + 64 <= g.end());
    }
}
