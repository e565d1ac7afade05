//! Geometry of the Minimum Update Subtree Tree.
//!
//! The per-bucket valid/read-counter sets of the metadata tree are packed
//! into subtrees (MUS). The lowest MUST level holds `leaf_span`-level
//! subtrees; every level above holds `nonleaf_span`-level subtrees, which
//! makes the MUST an `2^nonleaf_span`-ary tree. The topmost MUS may start
//! above the tree root; those virtual levels are simply empty.
//!
//! MUST levels are numbered `k = 0` (top) to `must_levels - 1` (leaf MUS).
//! Nodes are numbered in level order over the whole MUST. Inside a MUS,
//! positions are level-order too: 0 is the MUS root.

use serde::Serialize;
use thiserror::Error;

use crate::block::BLOCK_BITS;
use crate::codec::{IPOFFSET_BITS, LEAF_SETS, MAX_MUST_LEVELS, NONLEAF_SETS};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MustError {
    #[error("MUST spans must be >= 1 (leaf {leaf}, non-leaf {nonleaf})")]
    Span { leaf: usize, nonleaf: usize },
    #[error("leaf MUS of {0} levels exceeds the node's {LEAF_SETS} sets")]
    LeafSpan(usize),
    #[error("non-leaf MUS of {0} levels exceeds the node's {NONLEAF_SETS} sets")]
    NonLeafSpan(usize),
    #[error("{0} MUST levels exceed the leaf node's IPOffset room")]
    TooTall(usize),
    #[error("MUST of {levels} levels does not reach ORAM level {cached}")]
    Coverage { levels: usize, cached: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MustGeometry {
    pub tree_levels: usize,
    pub leaf_span: usize,
    pub nonleaf_span: usize,
    pub must_levels: usize,
    pub cached_must_levels: usize,
}

/// Where one bucket's valid/read-counter set lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VrLocation {
    pub must_level: usize,
    pub node: u64,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MustPathNode {
    pub must_level: usize,
    pub node: u64,
    /// Internal path, MUS root first; only positions of real tree levels.
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MustPath {
    pub nodes: Vec<MustPathNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StorageReport {
    pub nodes_per_level: Vec<u64>,
    pub total_nodes: u64,
    pub non_leaf_dram_nodes: u64,
    pub dram_nodes: u64,
    pub bytes_per_copy: u64,
    pub cached_bytes: u64,
}

impl MustGeometry {
    /// Smallest MUST that reaches the on-chip ORAM levels; the top
    /// `must_levels - 3` levels are kept on chip.
    pub fn derive(tree_levels: usize, cached_levels: usize, leaf_span: usize, nonleaf_span: usize) -> Result<Self, MustError> {
        if leaf_span == 0 || nonleaf_span == 0 {
            return Err(MustError::Span { leaf: leaf_span, nonleaf: nonleaf_span });
        }
        let mut m = 1;
        while (tree_levels as i64 - leaf_span as i64 - (m as i64 - 1) * nonleaf_span as i64) > cached_levels as i64 {
            m += 1;
        }
        Self::new(tree_levels, leaf_span, nonleaf_span, m, m.saturating_sub(3))
    }

    pub fn new(tree_levels: usize, leaf_span: usize, nonleaf_span: usize, must_levels: usize, cached_must_levels: usize) -> Result<Self, MustError> {
        if leaf_span == 0 || nonleaf_span == 0 {
            return Err(MustError::Span { leaf: leaf_span, nonleaf: nonleaf_span });
        }
        if (1usize << leaf_span) - 1 > LEAF_SETS {
            return Err(MustError::LeafSpan(leaf_span));
        }
        if (1usize << nonleaf_span) - 1 > NONLEAF_SETS {
            return Err(MustError::NonLeafSpan(nonleaf_span));
        }
        if must_levels == 0 || must_levels > MAX_MUST_LEVELS {
            return Err(MustError::TooTall(must_levels));
        }
        let g = MustGeometry { tree_levels, leaf_span, nonleaf_span, must_levels, cached_must_levels: cached_must_levels.min(must_levels - 1) };
        if g.root_level(0) >= tree_levels as i64 {
            return Err(MustError::Coverage { levels: must_levels, cached: tree_levels });
        }
        Ok(g)
    }

    /// Shallowest tree level whose valid bits live in the MUST; levels
    /// above it are on-chip buckets without read counters.
    pub fn first_tree_level(&self) -> usize {
        self.root_level(0).max(0) as usize
    }

    pub fn is_leaf_level(&self, k: usize) -> bool {
        k + 1 == self.must_levels
    }

    pub fn span(&self, k: usize) -> usize {
        if self.is_leaf_level(k) {
            self.leaf_span
        } else {
            self.nonleaf_span
        }
    }

    /// Tree level of the roots of MUST level `k`; negative when virtual.
    pub fn root_level(&self, k: usize) -> i64 {
        let leaf_root = self.tree_levels as i64 - self.leaf_span as i64;
        leaf_root - (self.must_levels - 1 - k) as i64 * self.nonleaf_span as i64
    }

    pub fn nodes_at(&self, k: usize) -> u64 {
        1u64 << self.root_level(k).max(0)
    }

    pub fn level_offset(&self, k: usize) -> u64 {
        (0..k).map(|i| self.nodes_at(i)).sum()
    }

    pub fn total_nodes(&self) -> u64 {
        self.level_offset(self.must_levels)
    }

    /// First node id stored in DRAM.
    pub fn first_dram_node(&self) -> u64 {
        self.level_offset(self.cached_must_levels)
    }

    pub fn dram_nodes(&self) -> u64 {
        self.total_nodes() - self.first_dram_node()
    }

    pub fn must_level_of_node(&self, node: u64) -> usize {
        (0..self.must_levels).find(|&k| node < self.level_offset(k + 1)).expect("node id within MUST")
    }

    pub fn is_leaf_node(&self, node: u64) -> bool {
        self.is_leaf_level(self.must_level_of_node(node))
    }

    /// MUST level holding tree level `level`.
    pub fn must_level_of(&self, level: usize) -> usize {
        (0..self.must_levels).find(|&k| (level as i64) < self.root_level(k) + self.span(k) as i64).expect("level within tree")
    }

    fn place(&self, k: usize, level: usize, index: u64) -> (u64, usize) {
        let r = self.root_level(k);
        let d = (level as i64 - r) as u32;
        let root_index = if r >= 0 { index >> d } else { 0 };
        let local = index - (root_index << d);
        (root_index, ((1u64 << d) - 1 + local) as usize)
    }

    pub fn locate(&self, level: usize, index: u64) -> VrLocation {
        let k = self.must_level_of(level);
        let (root_index, position) = self.place(k, level, index);
        VrLocation { must_level: k, node: self.level_offset(k) + root_index, position }
    }

    /// Parent node and the child-MAC index the parent keeps for `node`.
    pub fn parent(&self, node: u64) -> Option<(u64, usize)> {
        let k = self.must_level_of_node(node);
        if k == 0 {
            return None;
        }
        let ri = node - self.level_offset(k);
        let pri = if self.root_level(k - 1) >= 0 { ri >> self.nonleaf_span } else { 0 };
        Some((self.level_offset(k - 1) + pri, (ri - (pri << self.nonleaf_span)) as usize))
    }

    pub fn leaves_per_leaf_mus(&self) -> u64 {
        1 << (self.leaf_span - 1)
    }

    /// IPOffsets stored in leaf MUS `leaf_mus` (index within the leaf MUST
    /// level): for each ancestor MUST level, top first, the position of the
    /// bottom node of its internal path.
    pub fn ipoffsets(&self, leaf_mus: u64) -> Vec<u8> {
        let leaf_root = self.root_level(self.must_levels - 1);
        (0..self.must_levels - 1)
            .map(|k| {
                let bottom = self.root_level(k + 1) - 1;
                let index = leaf_mus >> (leaf_root - bottom);
                self.place(k, bottom as usize, index).1 as u8
            })
            .collect()
    }

    /// Internal path of a MUS of `span` levels ending at `bottom`, root
    /// first, restricted to positions at real tree levels.
    fn chain(&self, k: usize, bottom: usize) -> Vec<usize> {
        let skip = (-self.root_level(k)).max(0) as usize;
        let mut p = bottom;
        let mut v = vec![p];
        while p > 0 {
            p = (p - 1) / 2;
            v.push(p);
        }
        v.reverse();
        v.split_off(skip)
    }

    /// Maps a tree leaf (0-based leaf ordinal) to its MUST path.
    pub fn pmeta_to_must_path(&self, leaf: u64) -> MustPath {
        let per = self.leaves_per_leaf_mus();
        let leaf_mus = leaf / per;
        let last = self.must_levels - 1;
        let ipo = self.ipoffsets(leaf_mus);
        let leaf_root = self.root_level(last);
        let mut nodes = Vec::with_capacity(self.must_levels);
        for (k, &bottom) in ipo.iter().enumerate() {
            let r = self.root_level(k);
            let root_index = if r >= 0 { leaf_mus >> (leaf_root - r) } else { 0 };
            nodes.push(MustPathNode { must_level: k, node: self.level_offset(k) + root_index, positions: self.chain(k, bottom as usize) });
        }
        let bottom = (per - 1 + leaf % per) as usize;
        let leaf_index = if leaf_root >= 0 { leaf_mus } else { 0 };
        nodes.push(MustPathNode { must_level: last, node: self.level_offset(last) + leaf_index, positions: self.chain(last, bottom) });
        MustPath { nodes }
    }

    /// Resolves a non-leaf internal path from a stored IPOffset.
    pub fn internal_path_from_ipoffset(&self, k: usize, ipoffset: u8) -> Vec<usize> {
        self.chain(k, ipoffset as usize)
    }

    pub fn storage_report(&self) -> StorageReport {
        let nodes_per_level: Vec<u64> = (0..self.must_levels).map(|k| self.nodes_at(k)).collect();
        let block_bytes = (BLOCK_BITS / 8) as u64;
        let non_leaf_dram_nodes = (self.cached_must_levels..self.must_levels - 1).map(|k| self.nodes_at(k)).sum();
        StorageReport {
            total_nodes: self.total_nodes(),
            non_leaf_dram_nodes,
            dram_nodes: self.dram_nodes(),
            bytes_per_copy: self.total_nodes() * block_bytes,
            cached_bytes: self.first_dram_node() * block_bytes,
            nodes_per_level,
        }
    }

    /// Bits of IPOffset payload in each leaf node.
    pub fn ipoffset_bits(&self) -> usize {
        (self.must_levels - 1) * IPOFFSET_BITS
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force oracle: walk parents from the leaf in an explicit heap
    /// numbered tree and enumerate each MUS's nodes in level order.
    fn walk(g: &MustGeometry, leaf: u64) -> MustPath {
        let levels = g.tree_levels;
        let mut heap = (1u64 << (levels - 1)) - 1 + leaf;
        let mut chain = Vec::new();
        loop {
            chain.push(heap);
            if heap == 0 {
                break;
            }
            heap = (heap - 1) / 2;
        }
        chain.reverse(); // root first
        let level_of = |h: u64| 63 - (h + 1).leading_zeros() as usize;
        let mut nodes: Vec<MustPathNode> = Vec::new();
        for k in 0..g.must_levels {
            let r = g.root_level(k);
            let span = g.span(k) as i64;
            let members: Vec<u64> = chain.iter().copied().filter(|&h| (level_of(h) as i64) >= r && (level_of(h) as i64) < r + span).collect();
            let top = members[0];
            // explicit level-order enumeration of this MUS, virtual levels included
            let (root_heap_level, root_idx) = if r >= 0 { (r, (top + 1 - (1 << level_of(top))) >> (level_of(top) as i64 - r)) } else { (r, 0) };
            let mut order = Vec::new();
            for d in 0..span {
                let lvl = root_heap_level + d;
                for j in 0..(1u64 << d) {
                    order.push((lvl, (root_idx << d) + j));
                }
            }
            let positions = members
                .iter()
                .map(|&h| {
                    let key = (level_of(h) as i64, h + 1 - (1 << level_of(h)));
                    order.iter().position(|&o| o == key).unwrap()
                })
                .collect();
            let level_start: u64 = (0..k).map(|i| 1u64 << g.root_level(i).max(0)).sum();
            nodes.push(MustPathNode { must_level: k, node: level_start + root_idx, positions });
        }
        MustPath { nodes }
    }

    #[test]
    fn worked_example_uniform_three_level_subtrees() {
        let g = MustGeometry::new(6, 3, 3, 2, 0).unwrap();
        assert_eq!(g.total_nodes(), 9);
        // heap node 36 is leaf ordinal 5 (first leaf is node 31)
        let p = g.pmeta_to_must_path(36 - 31);
        let leaf = &p.nodes[1];
        assert_eq!(leaf.node, 2);
        assert_eq!(leaf.positions, vec![0, 1, 4]);
        // positions 0, 1, 4 of the MUS rooted at heap node 8 are nodes 8, 17, 36
        let heap_of = |pos: usize| {
            let d = 63 - (pos as u64 + 1).leading_zeros() as u64;
            let local = pos as u64 + 1 - (1 << d);
            (8 + 1) * (1 << d) - 1 + local
        };
        assert_eq!(leaf.positions.iter().map(|&p| heap_of(p)).collect::<Vec<_>>(), vec![8, 17, 36]);
        assert_eq!(g.ipoffsets(1), vec![3]);
        assert_eq!(g.internal_path_from_ipoffset(0, 3), vec![0, 1, 3]);
        assert_eq!(p.nodes[0].positions, vec![0, 1, 3]);
    }

    #[test]
    fn default_geometry_counts() {
        let g = MustGeometry::derive(23, 7, 5, 3).unwrap();
        assert_eq!(g.must_levels, 5);
        assert_eq!(g.cached_must_levels, 2);
        assert_eq!((0..5).map(|k| g.root_level(k)).collect::<Vec<_>>(), vec![6, 9, 12, 15, 18]);
        let r = g.storage_report();
        assert_eq!(r.nodes_per_level, vec![64, 512, 4096, 32768, 262144]);
        assert_eq!(r.non_leaf_dram_nodes, 36864);
        assert_eq!(r.bytes_per_copy, 21_570_048);
        assert_eq!(r.cached_bytes, 41_472);
        assert_eq!(g.ipoffset_bits(), 12);
    }

    #[test]
    fn parents_hold_eight_children() {
        let g = MustGeometry::derive(23, 7, 5, 3).unwrap();
        let mut seen = std::collections::HashSet::new();
        for node in g.level_offset(1)..g.total_nodes() {
            let (p, j) = g.parent(node).unwrap();
            assert!(j < 8 && g.must_level_of_node(p) + 1 == g.must_level_of_node(node));
            assert!(seen.insert((p, j)));
        }
        assert_eq!(g.parent(0), None);
        let toy = MustGeometry::new(6, 3, 3, 2, 0).unwrap();
        assert_eq!(g.parent(g.level_offset(1)), Some((0, 0)));
        assert_eq!(toy.parent(8), Some((0, 7)));
    }

    #[test]
    fn dram_path_length_is_constant() {
        let g = MustGeometry::derive(23, 7, 5, 3).unwrap();
        for leaf in [0u64, 1, 12345, (1 << 22) - 1] {
            let p = g.pmeta_to_must_path(leaf);
            let dram = p.nodes.iter().filter(|n| n.node >= g.first_dram_node()).count();
            assert_eq!(dram, 3);
        }
    }

    #[test]
    fn matches_tree_walk_for_all_small_trees() {
        for levels in 4..=12 {
            for (leaf_span, nonleaf_span) in [(3, 3), (5, 3), (2, 2), (4, 3)] {
                if leaf_span > levels {
                    continue;
                }
                for cached in [0usize, 1, 3] {
                    let Ok(g) = MustGeometry::derive(levels, cached, leaf_span, nonleaf_span) else { continue };
                    for leaf in 0..(1u64 << (levels - 1)) {
                        assert_eq!(g.pmeta_to_must_path(leaf), walk(&g, leaf), "levels {levels} spans {leaf_span}/{nonleaf_span} leaf {leaf}");
                    }
                }
            }
        }
    }

    #[test]
    fn locate_agrees_with_path() {
        let g = MustGeometry::derive(10, 3, 5, 3).unwrap();
        for leaf in 0..512u64 {
            let p = g.pmeta_to_must_path(leaf);
            let mut level = g.first_tree_level();
            for n in &p.nodes {
                for &pos in &n.positions {
                    let index = leaf >> (9 - level);
                    let loc = g.locate(level, index);
                    assert_eq!((loc.node, loc.position), (n.node, pos));
                    level += 1;
                }
            }
            assert_eq!(level, 10);
        }
    }
}
