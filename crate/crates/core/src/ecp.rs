//! Error Correction Pointers with rotation, fault classification, the
//! bucket remap table and the analytic failure-probability model.
//!
//! An ECP array of `n` entries lives inside a host block. Logical entry `j`
//! is stored in physical entry slot `(j + roffset) mod n`. Entries are
//! applied front to back and each is parsed from bits already corrected by
//! the entries before it, so a faulty cell inside entry `j` must be pointed
//! at by some entry `i < j`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::block::{PhysicalBlock, BLOCK_BITS};
use crate::codec::{ECP_ADDR_BITS, ECP_ENTRY_BITS, ECP_REGION, ECP_SENTINEL, LF_ECP, NL_ECP};
use crate::dram::{Dram, DramError};

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum EcpError {
    #[error("{faults} faulty cells exceed {entries} pointers")]
    Capacity { faults: usize, entries: usize },
    #[error("faulty cell {0} in the rotation field")]
    RotationField(usize),
    #[error("entry slot {slot} holds {faults} faulty cells")]
    EntryOverloaded { slot: usize, faults: usize },
    #[error("no rotation keeps every faulty pointer behind a healthy one")]
    NoRotation,
    #[error("remap table full ({0} entries)")]
    TableFull(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryFormat {
    /// 13-bit address + value; idle entries carry the sentinel address.
    Bucket,
    /// 10-bit address + value + in-use flag.
    Must,
}

/// Where an ECP array sits inside its host block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EcpLayout {
    pub region: usize,
    pub entries: usize,
    pub entry_bits: usize,
    pub roffset_at: usize,
    pub roffset_bits: usize,
    pub format: EntryFormat,
}

pub const BUCKET_ECP: EcpLayout =
    EcpLayout { region: ECP_REGION, entries: 5, entry_bits: ECP_ENTRY_BITS, roffset_at: 1, roffset_bits: 3, format: EntryFormat::Bucket };
pub const MUST_NONLEAF_ECP: EcpLayout = EcpLayout { region: NL_ECP, entries: 3, entry_bits: 12, roffset_at: 1, roffset_bits: 2, format: EntryFormat::Must };
pub const MUST_LEAF_ECP: EcpLayout = EcpLayout { region: LF_ECP, entries: 7, entry_bits: 12, roffset_at: 1, roffset_bits: 3, format: EntryFormat::Must };

/// An active pointer: cell address in the host's address space and the
/// value that cell must read as.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pointer {
    pub addr: usize,
    pub value: bool,
}

/// Solver output: rotation and, per logical entry, the faulty cell it covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub roffset: u8,
    pub targets: Vec<Option<usize>>,
}

impl EcpLayout {
    pub fn region_end(&self) -> usize {
        self.region + self.entries * self.entry_bits
    }

    /// Physical entry slot holding host bit `bit`, if any.
    pub fn slot_of(&self, bit: usize) -> Option<usize> {
        (self.region..self.region_end()).contains(&bit).then(|| (bit - self.region) / self.entry_bits)
    }

    pub fn in_rotation_field(&self, bit: usize) -> bool {
        (self.roffset_at..self.roffset_at + self.roffset_bits).contains(&bit)
    }

    fn parse(&self, host: &PhysicalBlock, slot: usize) -> Option<Pointer> {
        let raw = host.field(self.region + slot * self.entry_bits, self.entry_bits);
        match self.format {
            EntryFormat::Bucket => {
                let addr = (raw & ((1 << ECP_ADDR_BITS) - 1)) as usize;
                (addr < crate::codec::BUCKET_BITS).then_some(Pointer { addr, value: (raw >> ECP_ADDR_BITS) & 1 == 1 })
            }
            EntryFormat::Must => {
                let addr = (raw & 0x3ff) as usize;
                ((raw >> 11) & 1 == 1 && addr < BLOCK_BITS).then_some(Pointer { addr, value: (raw >> 10) & 1 == 1 })
            }
        }
    }

    fn encode(&self, p: Option<Pointer>) -> u64 {
        match (self.format, p) {
            (EntryFormat::Bucket, None) => ECP_SENTINEL as u64,
            (EntryFormat::Bucket, Some(p)) => p.addr as u64 | ((p.value as u64) << ECP_ADDR_BITS),
            (EntryFormat::Must, None) => 0,
            (EntryFormat::Must, Some(p)) => p.addr as u64 | ((p.value as u64) << 10) | (1 << 11),
        }
    }

    pub fn roffset(&self, host: &PhysicalBlock) -> usize {
        host.field(self.roffset_at, self.roffset_bits) as usize % self.entries
    }

    /// Corrects the host block in place and returns the active pointers in
    /// logical order. `host_base` is the host block's first address in the
    /// pointer address space.
    pub fn repair_host(&self, host: &mut PhysicalBlock, host_base: usize) -> Vec<Pointer> {
        let r = self.roffset(host);
        let mut active = Vec::with_capacity(self.entries);
        for j in 0..self.entries {
            if let Some(p) = self.parse(host, (j + r) % self.entries) {
                if (host_base..host_base + BLOCK_BITS).contains(&p.addr) {
                    host.set_bit(p.addr - host_base, p.value);
                }
                active.push(p);
            }
        }
        active
    }

    /// Places at most `entries` pointers so that each faulty cell inside the
    /// array is covered by an earlier entry. Rotations are tried starting at
    /// `start`. `faults` are host-space addresses; those below `BLOCK_BITS`
    /// are cells of the host block itself (`host_base` = 0).
    pub fn solve(&self, faults: &[usize], start: u8) -> Result<Assignment, EcpError> {
        self.solve_stuck(faults, start, &[])
    }

    /// Like [`solve`](Self::solve), but faulty cells of the rotation field
    /// listed in `stuck` (cell, stuck value) are tolerated by only choosing
    /// rotations whose encoding agrees with them.
    pub fn solve_stuck(&self, faults: &[usize], start: u8, stuck: &[(usize, bool)]) -> Result<Assignment, EcpError> {
        let mut faults: Vec<usize> = faults.iter().copied().filter(|f| !stuck.iter().any(|&(c, _)| c == *f && self.in_rotation_field(c))).collect();
        faults.sort_unstable();
        faults.dedup();
        if let Some(&f) = faults.iter().find(|&&f| self.in_rotation_field(f)) {
            return Err(EcpError::RotationField(f));
        }
        let fits = |r: usize| stuck.iter().filter(|&&(c, _)| self.in_rotation_field(c)).all(|&(c, v)| (r >> (c - self.roffset_at)) & 1 == v as usize);
        if faults.len() > self.entries {
            return Err(EcpError::Capacity { faults: faults.len(), entries: self.entries });
        }
        let mut per_slot = vec![0usize; self.entries];
        for &f in &faults {
            if let Some(s) = self.slot_of(f) {
                per_slot[s] += 1;
            }
        }
        if let Some((slot, &n)) = per_slot.iter().enumerate().find(|(_, &n)| n >= 3) {
            return Err(EcpError::EntryOverloaded { slot, faults: n });
        }
        let n = self.entries;
        'rot: for k in 0..n {
            let r = (start as usize + k) % n;
            if !fits(r) {
                continue;
            }
            let mut jobs: Vec<(usize, usize)> = Vec::with_capacity(faults.len());
            for &f in &faults {
                let deadline = match self.slot_of(f) {
                    Some(p) => {
                        let j = (p + n - r) % n;
                        if j == 0 {
                            continue 'rot;
                        }
                        j - 1
                    }
                    None => n - 1,
                };
                jobs.push((deadline, f));
            }
            jobs.sort_unstable();
            if jobs.iter().enumerate().any(|(i, &(d, _))| i > d) {
                continue;
            }
            let mut targets = vec![None; n];
            for (i, &(_, f)) in jobs.iter().enumerate() {
                targets[i] = Some(f);
            }
            return Ok(Assignment { roffset: r as u8, targets });
        }
        Err(EcpError::NoRotation)
    }

    /// Writes the rotation and pointer array into `host`. Values are filled
    /// from the last entry to the first, so a pointer at a cell inside a later
    /// entry sees that entry's final encoding. `external(addr)` supplies the
    /// intended bit of cells outside the host block.
    pub fn write(&self, host: &mut PhysicalBlock, host_base: usize, a: &Assignment, external: impl Fn(usize) -> bool) {
        let n = self.entries;
        host.set_field(self.roffset_at, self.roffset_bits, a.roffset as u64);
        host.set_field(0, 1, a.targets.iter().any(Option::is_some) as u64);
        for j in 0..n {
            host.set_field(self.region + ((j + a.roffset as usize) % n) * self.entry_bits, self.entry_bits, self.encode(None));
        }
        for j in (0..n).rev() {
            let Some(addr) = a.targets[j] else { continue };
            let value = if (host_base..host_base + BLOCK_BITS).contains(&addr) { host.bit(addr - host_base) } else { external(addr) };
            let slot = (j + a.roffset as usize) % n;
            host.set_field(self.region + slot * self.entry_bits, self.entry_bits, self.encode(Some(Pointer { addr, value })));
        }
    }
}

/// Overrides cells of a non-host block (`base` = its first address).
pub fn apply_pointers(block: &mut PhysicalBlock, base: usize, pointers: &[Pointer]) {
    for p in pointers {
        if (base..base + BLOCK_BITS).contains(&p.addr) {
            block.set_bit(p.addr - base, p.value);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultClass {
    Transient,
    /// Newly found stuck bits of the block.
    Permanent(Vec<usize>),
}

/// Writes the corrected block, reads it back and reports cells that did not
/// hold their value. Cells listed in `known` are already covered.
pub fn classify_fault(dram: &mut Dram, index: u64, intended: &PhysicalBlock, known: &[usize]) -> Result<FaultClass, DramError> {
    dram.write(index, intended)?;
    let back = dram.read(index)?.block;
    let bad: Vec<usize> = back.xor(intended).ones().into_iter().filter(|b| !known.contains(b)).collect();
    Ok(if bad.is_empty() { FaultClass::Transient } else { FaultClass::Permanent(bad) })
}

/// On-chip indirection from worn-out buckets to spare buckets.
#[derive(Debug, Clone, Default)]
pub struct RemapTable {
    map: BTreeMap<u64, u32>,
    next: u32,
    capacity: usize,
}

impl RemapTable {
    pub const DEFAULT_CAPACITY: usize = 1084;
    /// Bucket id (23 bits) + spare index (11 bits) per entry.
    pub const ENTRY_BITS: usize = 34;

    pub fn new(capacity: usize) -> Self {
        RemapTable { map: BTreeMap::new(), next: 0, capacity }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn lookup(&self, bucket: u64) -> Option<u32> {
        self.map.get(&bucket).copied()
    }

    /// Moves `bucket` to a fresh spare; a bucket already remapped moves again.
    pub fn remap(&mut self, bucket: u64) -> Result<u32, EcpError> {
        if self.next as usize >= self.capacity {
            return Err(EcpError::TableFull(self.capacity));
        }
        let spare = self.next;
        self.next += 1;
        self.map.insert(bucket, spare);
        Ok(spare)
    }

    pub fn encoded_bytes(&self) -> usize {
        (self.capacity * Self::ENTRY_BITS).div_ceil(8)
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, u32)> + '_ {
        self.map.iter().map(|(&b, &s)| (b, s))
    }
}

/// Closed-form fault statistics for independent per-cell failures.
pub mod analysis {
    /// P(X >= k), X ~ Binomial(n, p), summed in log space.
    pub fn binomial_tail(n: u64, p: f64, k: u64) -> f64 {
        if k == 0 {
            return 1.0;
        }
        let lq = (1.0 - p).ln();
        let lp = p.ln();
        let mut ln_c = 0.0; // ln C(n, 0)
        let mut below = 0.0;
        for i in 0..k.min(n + 1) {
            if i > 0 {
                ln_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
            }
            below += (ln_c + i as f64 * lp + (n - i) as f64 * lq).exp();
        }
        // direct upper sum is more accurate when the tail is tiny
        let mut upper = 0.0;
        let mut ln_c = ln_choose(n, k);
        for i in k..=n.min(k + 60) {
            if i > k {
                ln_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
            }
            upper += (ln_c + i as f64 * lp + (n - i) as f64 * lq).exp();
        }
        if upper < 1e-6 {
            upper
        } else {
            1.0 - below
        }
    }

    /// P(X >= k), X ~ Poisson(lambda).
    pub fn poisson_tail(lambda: f64, k: u64) -> f64 {
        let mut term = (-lambda).exp();
        let mut below = 0.0;
        for i in 0..k {
            if i > 0 {
                term *= lambda / i as f64;
            }
            below += term;
        }
        let mut t = (-lambda).exp();
        for i in 1..=k {
            t *= lambda / i as f64;
        }
        let mut upper = 0.0;
        for i in k..k + 60 {
            if i > k {
                t *= lambda / i as f64;
            }
            upper += t;
        }
        if upper < 1e-6 {
            upper
        } else {
            1.0 - below
        }
    }

    fn ln_choose(n: u64, k: u64) -> f64 {
        (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
    }

    /// Bits in one bucket (13 blocks).
    pub const BUCKET_BITS: u64 = 7488;
    /// fbit + roffset + five entries.
    pub const BUCKET_ECP_REGION_BITS: u64 = 74;
    /// A MUST node and its mirror.
    pub const MUST_PAIR_BITS: u64 = 2 * 576;

    /// Bucket needs remapping: more faults than pointers.
    pub fn bucket_overflow(p: f64) -> f64 {
        binomial_tail(BUCKET_BITS, p, 6)
    }

    /// Faults in the ECP region beyond what front repair can absorb.
    pub fn bucket_ecp_region_failure(p: f64) -> f64 {
        binomial_tail(BUCKET_ECP_REGION_BITS, p, 5)
    }

    pub fn must_nonleaf_failure(p: f64) -> f64 {
        binomial_tail(MUST_PAIR_BITS, p, 4)
    }

    pub fn must_leaf_failure(p: f64) -> f64 {
        binomial_tail(MUST_PAIR_BITS, p, 8)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dram::{DramGeometry, FaultKind, FaultRecord};
    use rand::seq::index::sample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_block(rng: &mut impl Rng) -> PhysicalBlock {
        let mut b = PhysicalBlock::ZERO;
        for w in b.words.iter_mut() {
            *w = rng.random();
        }
        b
    }

    /// Writes an assignment for `faults` over `content`, corrupts the faulty
    /// cells, and checks that repair restores the content.
    fn round_trip(layout: &EcpLayout, content: &PhysicalBlock, faults: &[usize], rng: &mut impl Rng) -> Result<(), EcpError> {
        let a = layout.solve(faults, 0)?;
        let mut stored = *content;
        layout.write(&mut stored, 0, &a, |_| unreachable!());
        let mut raw = stored;
        for &f in faults {
            raw.set_bit(f, rng.random());
        }
        layout.repair_host(&mut raw, 0);
        assert_eq!(raw, stored, "faults {faults:?} roffset {}", a.roffset);
        Ok(())
    }

    #[test]
    fn empty_set_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = random_block(&mut rng);
        let a = BUCKET_ECP.solve(&[], 0).unwrap();
        BUCKET_ECP.write(&mut b, 0, &a, |_| false);
        let before = b;
        assert!(BUCKET_ECP.repair_host(&mut b, 0).is_empty());
        assert_eq!(b, before);
    }

    #[test]
    fn single_stuck_at_zero() {
        let mut b = PhysicalBlock::ZERO;
        b.set_bit(100, true);
        let a = BUCKET_ECP.solve(&[100], 0).unwrap();
        BUCKET_ECP.write(&mut b, 0, &a, |_| false);
        let good = b;
        b.set_bit(100, false);
        let ptrs = BUCKET_ECP.repair_host(&mut b, 0);
        assert_eq!(ptrs, vec![Pointer { addr: 100, value: true }]);
        assert_eq!(b, good);
    }

    #[test]
    fn fault_in_third_entry_uses_the_first() {
        let bit = ECP_REGION + 2 * ECP_ENTRY_BITS + 5;
        let a = BUCKET_ECP.solve(&[bit], 0).unwrap();
        assert_eq!(a.roffset, 0);
        assert_eq!(a.targets[0], Some(bit));
    }

    #[test]
    fn fault_in_first_entry_rotates_by_one() {
        let bit = ECP_REGION + 3;
        let a = BUCKET_ECP.solve(&[bit], 0).unwrap();
        assert_eq!(a.roffset, 1);
        // the faulty slot 0 now holds logical entry 4; logical entry 0 covers it
        assert_eq!(a.targets[0], Some(bit));
    }

    #[test]
    fn two_faults_in_one_entry_reserve_two_earlier() {
        let e3 = ECP_REGION + 3 * ECP_ENTRY_BITS;
        let a = BUCKET_ECP.solve(&[e3 + 1, e3 + 9], 0).unwrap();
        assert_eq!(&a.targets[..2], &[Some(e3 + 1), Some(e3 + 9)]);
        assert!(matches!(BUCKET_ECP.solve(&[e3, e3 + 1, e3 + 2], 0), Err(EcpError::EntryOverloaded { .. })));
    }

    #[test]
    fn rotation_field_and_capacity() {
        assert_eq!(BUCKET_ECP.solve(&[2], 0), Err(EcpError::RotationField(2)));
        assert!(matches!(BUCKET_ECP.solve(&[600, 700, 800, 900, 1000, 1100], 0), Err(EcpError::Capacity { .. })));
        let region: Vec<usize> = (0..5).map(|i| ECP_REGION + i * ECP_ENTRY_BITS).collect();
        assert_eq!(BUCKET_ECP.solve(&region, 0), Err(EcpError::NoRotation));
    }

    #[test]
    fn stuck_rotation_cells_pin_the_rotation() {
        // low roffset bit stuck at one: only odd rotations remain
        let a = BUCKET_ECP.solve_stuck(&[1], 0, &[(1, true)]).unwrap();
        assert_eq!(a.roffset % 2, 1);
        let a = BUCKET_ECP.solve_stuck(&[2], 0, &[(2, true)]).unwrap();
        assert_eq!(a.roffset & 2, 2);
        // low and high bits stuck at one leave only 5 and 7, both out of range
        assert!(BUCKET_ECP.solve_stuck(&[1, 3], 0, &[(1, true), (3, true)]).is_err());
    }

    #[test]
    fn four_faults_in_the_region_always_repair() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let faults: Vec<usize> = sample(&mut rng, 70, 4).into_iter().map(|i| ECP_REGION + i).collect();
            let content = random_block(&mut rng);
            match round_trip(&BUCKET_ECP, &content, &faults, &mut rng) {
                Ok(()) => {}
                Err(EcpError::EntryOverloaded { .. }) => {}
                Err(e) => panic!("{faults:?}: {e}"),
            }
        }
    }

    #[test]
    fn randomized_campaign_matches_capacity_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5000 {
            let in_region = rng.random_range(0..=5usize);
            let outside = rng.random_range(0..=(5 - in_region.min(5)));
            let mut faults: Vec<usize> = sample(&mut rng, 70, in_region).into_iter().map(|i| ECP_REGION + i).collect();
            faults.extend(sample(&mut rng, 576 - 74, outside).into_iter().map(|i| 74 + i));
            let overloaded = (0..5).any(|s| faults.iter().filter(|&&f| BUCKET_ECP.slot_of(f) == Some(s)).count() >= 3);
            let content = random_block(&mut rng);
            let r = round_trip(&BUCKET_ECP, &content, &faults, &mut rng);
            if in_region == 5 {
                assert!(r.is_err());
            } else if !overloaded {
                assert_eq!(r, Ok(()), "{faults:?}");
            }
        }
    }

    #[test]
    fn pointers_only_reach_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let n = rng.random_range(1..=4);
            let faults: Vec<usize> = sample(&mut rng, 70, n).into_iter().map(|i| ECP_REGION + i).collect();
            let Ok(a) = BUCKET_ECP.solve(&faults, rng.random_range(0..5)) else { continue };
            for (j, t) in a.targets.iter().enumerate() {
                if let Some(s) = t.and_then(|f| BUCKET_ECP.slot_of(f)) {
                    let owner = (s + 5 - a.roffset as usize) % 5;
                    assert!(owner > j);
                }
            }
        }
    }

    #[test]
    fn external_cells_get_their_intended_value() {
        let mut host = PhysicalBlock::ZERO;
        let a = BUCKET_ECP.solve(&[576 * 3 + 17], 0).unwrap();
        BUCKET_ECP.write(&mut host, 0, &a, |addr| addr == 576 * 3 + 17);
        let ptrs = BUCKET_ECP.repair_host(&mut host.clone(), 0);
        let mut slot = PhysicalBlock::ZERO;
        apply_pointers(&mut slot, 576 * 3, &ptrs);
        assert!(slot.bit(17));
    }

    #[test]
    fn mirrored_pair_shares_one_array() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for layout in [MUST_NONLEAF_ECP, MUST_LEAF_ECP] {
            for _ in 0..3000 {
                let content = random_block(&mut rng);
                let k = rng.random_range(1..=layout.entries);
                let a_faults: Vec<usize> = sample(&mut rng, 576, k).into_iter().collect();
                let split = rng.random_range(0..=k);
                let (in_node, in_mirror) = a_faults.split_at(split);
                let mut union: Vec<usize> = a_faults.clone();
                union.retain(|&f| !layout.in_rotation_field(f) && f != 0);
                let Ok(a) = layout.solve(&union, 0) else { continue };
                let mut stored = content;
                layout.write(&mut stored, 0, &a, |_| unreachable!());
                let mut node = stored;
                let mut mirror = stored;
                for &f in in_node.iter().filter(|f| union.contains(f)) {
                    node.set_bit(f, rng.random());
                }
                for &f in in_mirror.iter().filter(|f| union.contains(f)) {
                    mirror.set_bit(f, rng.random());
                }
                layout.repair_host(&mut node, 0);
                layout.repair_host(&mut mirror, 0);
                assert_eq!(node, stored);
                assert_eq!(mirror, stored);
            }
        }
    }

    #[test]
    fn same_cell_in_both_copies_takes_one_pointer() {
        let bit = 300;
        let a = MUST_NONLEAF_ECP.solve(&[bit, bit], 0).unwrap();
        assert_eq!(a.targets.iter().filter(|t| t.is_some()).count(), 1);
    }

    #[test]
    fn mirrored_rotation_when_first_entry_breaks() {
        let bit = MUST_NONLEAF_ECP.region + 4;
        let a = MUST_NONLEAF_ECP.solve(&[bit], 0).unwrap();
        assert_eq!(a.roffset, 1);
    }

    #[test]
    fn classification_campaign() {
        let g = DramGeometry { channels: 2, dimms_per_channel: 1, ranks_per_dimm: 1, banks: 4, rows: 128, columns: 4 };
        let mut d = Dram::new(g, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut correct = 0;
        for i in 0..1000u64 {
            let content = random_block(&mut rng);
            d.write(i, &content).unwrap();
            let bit = rng.random_range(0..576);
            let coords = crate::dram::map_address(i, &g).unwrap();
            let permanent = i % 2 == 1;
            if permanent {
                // stuck at the opposite value so the error is visible
                d.inject_fault(FaultRecord::bit(FaultKind::Permanent, coords, bit as u32, Some(!content.bit(bit)))).unwrap();
            } else {
                d.inject_fault(FaultRecord::bit(FaultKind::Transient, coords, bit as u32, None)).unwrap();
            }
            let seen = d.read(i).unwrap().block;
            assert_eq!(seen.xor(&content).ones(), vec![bit]);
            let class = classify_fault(&mut d, i, &content, &[]).unwrap();
            let ok = match class {
                FaultClass::Transient => !permanent,
                FaultClass::Permanent(bits) => permanent && bits == vec![bit],
            };
            correct += ok as usize;
        }
        assert_eq!(correct, 1000);
    }

    #[test]
    fn remap_table_bounds() {
        let mut t = RemapTable::new(RemapTable::DEFAULT_CAPACITY);
        assert!(t.encoded_bytes() <= 8192);
        for b in 0..1084 {
            assert_eq!(t.remap(b * 3).unwrap(), b as u32);
        }
        assert_eq!(t.remap(1), Err(EcpError::TableFull(1084)));
        assert_eq!(t.lookup(3), Some(1));
    }

    #[test]
    fn analytic_figures() {
        use analysis::*;
        let p = 1e-4;
        let within2 = |x: f64, target: f64| x / target < 2.0 && target / x < 2.0;
        assert!(within2(bucket_overflow(p), 1.29e-4));
        assert!(within2(bucket_ecp_region_failure(p), 1.6e-13));
        assert!(within2(must_nonleaf_failure(p), 6.7e-6));
        assert!(within2(must_leaf_failure(p), 6.8e-13));
        assert!(within2(36864.0 * must_nonleaf_failure(p), 0.25));
        assert!(within2(poisson_tail(7488.0 * p, 6), bucket_overflow(p)));
        assert!((binomial_tail(10, 0.5, 0) - 1.0).abs() < 1e-12);
        assert!((binomial_tail(10, 0.5, 10) - 1.0 / 1024.0).abs() < 1e-12);
    }
}
