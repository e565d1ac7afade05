//! Reading, verifying and writing the DRAM part of a MUST path.

use super::controller::{MustCursor, Oram, Traffic};
use super::SimError;
use crate::block::PhysicalBlock;
use crate::codec::{MustNode, VrSet};
use crate::crypto::Mac54;
use crate::ecp::{EcpLayout, FaultClass, MUST_LEAF_ECP, MUST_NONLEAF_ECP};
use crate::must::{MustGeometry, VrLocation};
use crate::rit::RitViolation;

pub(super) fn must_ecp_layout(leaf: bool) -> EcpLayout {
    if leaf {
        MUST_LEAF_ECP
    } else {
        MUST_NONLEAF_ECP
    }
}

impl Oram {
    fn must_geom(&self) -> MustGeometry {
        self.must.expect("scheme keeps a MUST")
    }

    fn mirrored(&self) -> bool {
        self.cfg.scheme.replication()
    }

    /// Primary copy of a DRAM node; the mirror is the next block.
    pub(super) fn must_location(&self, node: u64) -> u64 {
        match self.must_relocated.get(&node) {
            Some(&spare) => self.layout.must_spare_pair_base(spare),
            None => self.layout.must_pair_base(node - self.must_geom().first_dram_node()),
        }
    }

    fn copy_traffic(copy: u64) -> Traffic {
        if copy == 0 {
            Traffic::MustPrimary
        } else {
            Traffic::MustMirror
        }
    }

    /// MAC the parent (or the on-chip anchor) holds for `node`.
    fn must_expected(&self, g: &MustGeometry, node: u64) -> Mac54 {
        match g.parent(node) {
            None => self.must_anchor.get(&node).copied().unwrap_or(Mac54::PRISTINE),
            Some((p, j)) => {
                let parent = if p < g.first_dram_node() {
                    &self.must_cached[p as usize]
                } else {
                    &self.must_path.iter().find(|c| c.node == p).expect("parent loaded first").block
                };
                match parent {
                    MustNode::NonLeaf(n) => n.child_macs[j],
                    MustNode::Leaf(_) => unreachable!("leaf nodes have no children"),
                }
            }
        }
    }

    fn set_must_mac(&mut self, g: &MustGeometry, node: u64, mac: Mac54) {
        match g.parent(node) {
            None => {
                self.must_anchor.insert(node, mac);
            }
            Some((p, j)) => {
                let parent = if p < g.first_dram_node() {
                    &mut self.must_cached[p as usize]
                } else {
                    &mut self.must_path.iter_mut().find(|c| c.node == p).expect("parent on path").block
                };
                if let MustNode::NonLeaf(n) = parent {
                    n.child_macs[j] = mac;
                }
            }
        }
    }

    /// Verifies one stored copy; returns the repaired block.
    pub(super) fn check_must(&self, g: &MustGeometry, node: u64, raw: &PhysicalBlock, expected: Mac54) -> Option<PhysicalBlock> {
        if expected.is_pristine() {
            return raw.is_zero().then_some(*raw);
        }
        let mut b = *raw;
        if self.ecp() {
            must_ecp_layout(g.is_leaf_node(node)).repair_host(&mut b, 0);
        }
        (self.keys.mac_must(node, &b) == expected).then_some(b)
    }

    /// Loads the DRAM MUST nodes covering the path to `leaf`, alternating
    /// copies between accesses when mirrored.
    pub(super) fn must_load(&mut self, leaf: u64) -> Result<(), SimError> {
        let g = self.must_geom();
        let mp = g.pmeta_to_must_path(leaf);
        if self.mirrored() {
            self.must_copy ^= 1;
        }
        let copy = self.must_copy;
        self.must_path.clear();
        for n in mp.nodes.iter().filter(|n| n.node >= g.first_dram_node()) {
            let expected = self.must_expected(&g, n.node);
            let base = self.must_location(n.node);
            let raw = self.read_block(base + copy, Self::copy_traffic(copy))?;
            self.clock.critical_mac();
            let stored = match self.check_must(&g, n.node, &raw, expected) {
                Some(b) => b,
                None => self.recover_must(&g, n.node, base, copy, expected)?,
            };
            let block = MustNode::decode(&stored, g.is_leaf_node(n.node), g.must_levels);
            self.must_path.push(MustCursor { node: n.node, block });
        }
        Ok(())
    }

    /// Restores a MUST copy that failed its MAC from the other copy.
    fn recover_must(&mut self, g: &MustGeometry, node: u64, base: u64, copy: u64, expected: Mac54) -> Result<PhysicalBlock, SimError> {
        self.stats.detections += 1;
        let violation = || SimError::Integrity(format!("MUST node {node} fails its MAC"));
        if !self.mirrored() {
            self.stats.violations += 1;
            self.violations.push(RitViolation::Must { node });
            return Err(violation());
        }
        self.recovering += 1;
        let other = self.read_block(base + (1 - copy), Self::copy_traffic(1 - copy));
        let good = other.map(|raw| self.check_must(g, node, &raw, expected));
        let result = match good {
            Ok(Some(good)) => {
                let known: Vec<usize> = self.must_faults.get(&node).cloned().unwrap_or_default();
                match self.classify(base + copy, &good, &known) {
                    Ok(FaultClass::Permanent(bits)) => {
                        self.stats.permanent_errors += 1;
                        self.must_faults.entry(node).or_default().extend(bits);
                        Ok(good)
                    }
                    Ok(FaultClass::Transient) => {
                        self.stats.transient_errors += 1;
                        Ok(good)
                    }
                    Err(e) => Err(e),
                }
            }
            Ok(None) => {
                self.stats.violations += 1;
                self.violations.push(RitViolation::Must { node });
                Err(violation())
            }
            Err(e) => Err(e),
        };
        self.recovering -= 1;
        if result.is_ok() {
            self.stats.must_repairs += 1;
        }
        result
    }

    pub(super) fn vr_get(&self, loc: &VrLocation) -> VrSet {
        let g = self.must.as_ref().expect("must");
        if loc.node < g.first_dram_node() {
            return self.must_cached[loc.node as usize].vr()[loc.position];
        }
        self.must_path.iter().find(|c| c.node == loc.node).expect("node on path").block.vr()[loc.position]
    }

    pub(super) fn vr_set(&mut self, loc: &VrLocation, vr: VrSet) {
        let first = self.must.as_ref().expect("must").first_dram_node();
        let node = if loc.node < first {
            &mut self.must_cached[loc.node as usize]
        } else {
            &mut self.must_path.iter_mut().find(|c| c.node == loc.node).expect("node on path").block
        };
        node.vr_mut()[loc.position] = vr;
    }

    /// Encodes the loaded MUST path leaf-first, chaining each node's MAC into
    /// its parent, and writes both copies.
    pub(super) fn must_store(&mut self) -> Result<(), SimError> {
        let g = self.must_geom();
        for i in (0..self.must_path.len()).rev() {
            let node = self.must_path[i].node;
            let leaf = g.is_leaf_node(node);
            if let MustNode::Leaf(l) = &mut self.must_path[i].block {
                l.ipoffsets = g.ipoffsets(node - g.level_offset(g.must_levels - 1));
            }
            let mut block = self.must_path[i].block.encode();
            if self.ecp() {
                let layout = must_ecp_layout(leaf);
                let faults = self.must_faults.get(&node).cloned().unwrap_or_default();
                let a = match layout.solve(&faults, self.must_path[i].block.roffset()) {
                    Ok(a) => a,
                    Err(_) => {
                        self.relocate_must(node)?;
                        layout.solve(&[], 0).expect("no faults")
                    }
                };
                layout.write(&mut block, 0, &a, |_| false);
                self.must_path[i].block = MustNode::decode(&block, leaf, g.must_levels);
            }
            let mac = self.keys.mac_must(node, &block);
            self.clock.background_mac();
            self.set_must_mac(&g, node, mac);
            let base = self.must_location(node);
            self.write_block(base, &block, Traffic::MustPrimary)?;
            if self.mirrored() {
                self.write_block(base + 1, &block, Traffic::MustMirror)?;
            }
        }
        Ok(())
    }

    fn relocate_must(&mut self, node: u64) -> Result<(), SimError> {
        if self.must_spares_used >= self.layout.must_spares {
            return Err(SimError::Reliability(format!("no spare left for MUST node {node}")));
        }
        self.must_relocated.insert(node, self.must_spares_used);
        self.must_spares_used += 1;
        self.must_faults.remove(&node);
        self.stats.must_relocations += 1;
        Ok(())
    }
}
