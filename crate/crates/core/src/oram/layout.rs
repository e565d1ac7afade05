//! Placement of the tree, the MUST copies and the spare areas in DRAM.
//!
//! From block 0: the DRAM-resident buckets in heap order (13 blocks each),
//! padded to an even length; MUST node pairs (primary on channel 0, mirror
//! on channel 1); spare MUST pairs; and, at the very top of DRAM, the spare
//! buckets used by the remap table.

use std::fmt::Write as _;

use crate::codec::BUCKET_BLOCKS;
use crate::dram::DramGeometry;

const BB: u64 = BUCKET_BLOCKS as u64;

/// What a block index holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// Position `pos` (0 metadata, 1..=12 slots) of tree bucket `id` at its
    /// home location.
    Bucket {
        id: u64,
        pos: usize,
    },
    /// Copy of MUST node pair `pair` (offset from the first DRAM node).
    Must {
        pair: u64,
        mirror: bool,
    },
    MustSpare {
        spare: u64,
        mirror: bool,
    },
    RemapSpare {
        spare: u64,
        pos: usize,
    },
    Unused,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tree_levels: usize,
    pub cached_levels: usize,
    /// Heap id of the first DRAM-resident bucket.
    pub first_bucket: u64,
    pub dram_buckets: u64,
    pub tree_blocks: u64,
    pub must_base: u64,
    pub must_pairs: u64,
    pub must_spare_base: u64,
    pub must_spares: u64,
    pub remap_base: u64,
    pub remap_capacity: u64,
    pub capacity: u64,
}

impl Layout {
    /// Lays out the regions and returns the DRAM geometry that holds them:
    /// `dram` (or the default) unless it is too small.
    pub fn new(
        tree_levels: usize,
        cached_levels: usize,
        must_pairs: u64,
        must_spares: u64,
        remap_capacity: u64,
        dram: Option<DramGeometry>,
    ) -> (Layout, DramGeometry) {
        let first_bucket = (1u64 << cached_levels) - 1;
        let dram_buckets = (1u64 << tree_levels) - (1u64 << cached_levels);
        let tree_blocks = (dram_buckets * BB).next_multiple_of(2);
        let must_base = tree_blocks;
        let must_spare_base = must_base + 2 * must_pairs;
        let remap_blocks = remap_capacity * BB;
        let needed = must_spare_base + 2 * must_spares + remap_blocks;
        let mut g = dram.unwrap_or_default();
        if g.capacity() < needed {
            g = g.fitted(needed);
        }
        let capacity = g.capacity();
        let layout = Layout {
            tree_levels,
            cached_levels,
            first_bucket,
            dram_buckets,
            tree_blocks,
            must_base,
            must_pairs,
            must_spare_base,
            must_spares,
            remap_base: capacity - remap_blocks,
            remap_capacity,
            capacity,
        };
        (layout, g)
    }

    pub fn is_cached(&self, id: u64) -> bool {
        id < self.first_bucket
    }

    /// Home location of a DRAM bucket's metadata block.
    pub fn bucket_base(&self, id: u64) -> u64 {
        debug_assert!(!self.is_cached(id));
        (id - self.first_bucket) * BB
    }

    pub fn spare_base(&self, spare: u32) -> u64 {
        self.remap_base + spare as u64 * BB
    }

    /// Primary copy of MUST pair `pair`; the mirror is the next block.
    pub fn must_pair_base(&self, pair: u64) -> u64 {
        self.must_base + 2 * pair
    }

    pub fn must_spare_pair_base(&self, spare: u64) -> u64 {
        self.must_spare_base + 2 * spare
    }

    pub fn locate(&self, index: u64) -> Region {
        if index < self.dram_buckets * BB {
            Region::Bucket { id: self.first_bucket + index / BB, pos: (index % BB) as usize }
        } else if (self.must_base..self.must_spare_base).contains(&index) {
            let k = index - self.must_base;
            Region::Must { pair: k / 2, mirror: k % 2 == 1 }
        } else if (self.must_spare_base..self.must_spare_base + 2 * self.must_spares).contains(&index) {
            let k = index - self.must_spare_base;
            Region::MustSpare { spare: k / 2, mirror: k % 2 == 1 }
        } else if index >= self.remap_base && index < self.capacity {
            let k = index - self.remap_base;
            Region::RemapSpare { spare: k / BB, pos: (k % BB) as usize }
        } else {
            Region::Unused
        }
    }

    /// Heap ids from the root to `leaf`.
    pub fn path(&self, leaf: u64) -> Vec<u64> {
        let l = self.tree_levels;
        let node = (1u64 << (l - 1)) + leaf;
        (0..l).map(|k| (node >> (l - 1 - k)) - 1).collect()
    }

    pub fn level_of(id: u64) -> usize {
        (63 - (id + 1).leading_zeros()) as usize
    }

    /// Index of a bucket within its level.
    pub fn index_in_level(id: u64) -> u64 {
        id + 1 - (1 << Self::level_of(id))
    }

    pub fn manifest(&self, g: &DramGeometry) -> String {
        let mut s = String::new();
        let _ =
            writeln!(s, "dram channels={} ranks={} banks={} rows={} columns={} capacity={}", g.channels, g.ranks(), g.banks, g.rows, g.columns, self.capacity);
        let _ = writeln!(
            s,
            "tree levels={} cached={} first_bucket={} buckets={} blocks=[0,{})",
            self.tree_levels, self.cached_levels, self.first_bucket, self.dram_buckets, self.tree_blocks
        );
        let _ = writeln!(s, "must pairs={} blocks=[{},{})", self.must_pairs, self.must_base, self.must_spare_base);
        let _ = writeln!(s, "must_spares pairs={} blocks=[{},{})", self.must_spares, self.must_spare_base, self.must_spare_base + 2 * self.must_spares);
        let _ = writeln!(s, "remap spares={} blocks=[{},{})", self.remap_capacity, self.remap_base, self.capacity);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_layout() -> Layout {
        Layout::new(23, 7, 299_008, 64, 1084, None).0
    }

    #[test]
    fn default_layout_fits_default_geometry() {
        let (l, g) = Layout::new(23, 7, 299_008, 64, 1084, None);
        assert_eq!(g, DramGeometry::default());
        assert_eq!(l.first_bucket, 127);
        assert_eq!(l.dram_buckets, (1 << 23) - 128);
        assert!(l.must_spare_base + 128 <= l.remap_base);
        assert_eq!(l.must_base % 2, 0);
    }

    #[test]
    fn small_geometry_grows() {
        let tiny = DramGeometry { channels: 2, dimms_per_channel: 1, ranks_per_dimm: 1, banks: 1, rows: 1, columns: 8 };
        let (l, g) = Layout::new(10, 3, 100, 4, 8, Some(tiny));
        assert!(g.capacity() >= l.must_spare_base + 8 + 8 * 13);
        assert_eq!(g.columns, 8);
    }

    #[test]
    fn locate_inverts_bases() {
        let l = default_layout();
        assert_eq!(l.locate(l.bucket_base(127)), Region::Bucket { id: 127, pos: 0 });
        assert_eq!(l.locate(l.bucket_base(5000) + 7), Region::Bucket { id: 5000, pos: 7 });
        assert_eq!(l.locate(l.must_pair_base(3) + 1), Region::Must { pair: 3, mirror: true });
        assert_eq!(l.locate(l.must_spare_pair_base(2)), Region::MustSpare { spare: 2, mirror: false });
        assert_eq!(l.locate(l.spare_base(9) + 12), Region::RemapSpare { spare: 9, pos: 12 });
        assert_eq!(l.locate(l.tree_blocks + 2 * l.must_pairs + 2 * l.must_spares), Region::Unused);
    }

    #[test]
    fn paths_follow_heap_order() {
        let l = Layout::new(4, 1, 0, 0, 0, None).0;
        assert_eq!(l.path(0), vec![0, 1, 3, 7]);
        assert_eq!(l.path(7), vec![0, 2, 6, 14]);
        for id in [0u64, 1, 2, 6, 7, 14] {
            let lv = Layout::level_of(id);
            assert!(Layout::index_in_level(id) < 1 << lv);
        }
        assert_eq!(Layout::level_of(14), 3);
        assert_eq!(Layout::index_in_level(14), 7);
    }
}
