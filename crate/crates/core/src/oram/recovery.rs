//! Repair paths: a data slot that fails its MAC (case 1), a metadata block
//! that fails its MAC (case 2) and a lost channel (case 3). None of them
//! draws from the protocol RNG, so a repaired run stays in lockstep with a
//! fault-free one.

use std::collections::{BTreeSet, HashMap};

use super::controller::{Oram, PathBucket, Traffic};
use super::layout::Region;
use super::SimError;
use crate::block::{Payload, PhysicalBlock, BLOCK_BITS};
use crate::codec::{unpack_ecc_area, BucketMetadata, SLOTS};
use crate::crypto::{EncCtr, Mac54};
use crate::ecp::{apply_pointers, FaultClass, Pointer, BUCKET_ECP};
use crate::replication::{join_encctr, locate_replica, BucketChannels, SlotRole, SHARDS};
use crate::rit::{child_side, meta_mac, meta_replica_payload, open_metadata, seal_metadata, verify_data_block, RitViolation, SlotKind};

impl Oram {
    /// Writes `intended`, reads it back and reports cells that disagree.
    pub(super) fn classify(&mut self, index: u64, intended: &PhysicalBlock, known: &[usize]) -> Result<FaultClass, SimError> {
        self.write_block(index, intended, Traffic::Data)?;
        let back = self.read_block(index, Traffic::Data)?;
        let bad: Vec<usize> = back.xor(intended).ones().into_iter().filter(|b| !known.contains(b)).collect();
        Ok(if bad.is_empty() { FaultClass::Transient } else { FaultClass::Permanent(bad) })
    }

    fn note_class(&mut self, id: u64, offset: usize, class: FaultClass) {
        match class {
            FaultClass::Transient => self.stats.transient_errors += 1,
            FaultClass::Permanent(bits) => {
                self.stats.permanent_errors += 1;
                self.pending.entry(id).or_default().extend(bits.into_iter().map(|b| offset + b));
            }
        }
    }

    fn violation(&mut self, v: RitViolation) -> SimError {
        self.stats.violations += 1;
        let msg = v.to_string();
        self.violations.push(v);
        SimError::Integrity(msg)
    }

    /// Plaintext and MAC domain slot `slot` ought to hold, taken from its
    /// replica or regenerated. `live` holds already-read blocks of the other
    /// channel.
    fn slot_content(&mut self, pb: &PathBucket, slot: usize, live: &HashMap<usize, PhysicalBlock>) -> Result<(Payload, SlotKind), SimError> {
        let plan = locate_replica(&pb.meta, &pb.ch);
        match plan.role(&pb.meta, slot) {
            SlotRole::MetaReplica => Ok((meta_replica_payload(&pb.meta), SlotKind::MetaReplica)),
            SlotRole::Dummy => Ok(([0; 8], SlotKind::Data)),
            SlotRole::Real(_) | SlotRole::RealReplica(_) => {
                let cp = plan.counterpart(&pb.meta, slot).expect("real blocks have a replica");
                let mut b = match live.get(&cp) {
                    Some(b) => *b,
                    None => self.read_block(pb.base + 1 + cp as u64, Traffic::Data)?,
                };
                apply_pointers(&mut b, (cp + 1) * BLOCK_BITS, &pb.pointers);
                if verify_data_block(&self.keys, SlotKind::Data, pb.id, cp, pb.meta.enc_ctr, &b).is_err() {
                    return Err(self.violation(RitViolation::Data { bucket: pb.id, slot: cp }));
                }
                Ok((self.keys.otp_crypt(pb.id, pb.meta.enc_ctr, cp as u8, &b.data()), SlotKind::Data))
            }
        }
    }

    /// Case 1: restores a slot that failed its MAC and returns its plaintext.
    pub(super) fn recover_slot(&mut self, pb: &mut PathBucket, slot: usize) -> Result<Payload, SimError> {
        self.stats.detections += 1;
        if !self.cfg.scheme.replication() {
            return Err(self.violation(RitViolation::Data { bucket: pb.id, slot }));
        }
        self.recovering += 1;
        let r = self.recover_slot_inner(pb, slot);
        self.recovering -= 1;
        let plain = r?;
        self.stats.recoveries_case1 += 1;
        if self.pending.contains_key(&pb.id) && !pb.reshuffle {
            pb.reshuffle = true;
            self.stats.repair_reshuffles += 1;
        }
        Ok(plain)
    }

    fn recover_slot_inner(&mut self, pb: &PathBucket, slot: usize) -> Result<Payload, SimError> {
        let ctr = pb.meta.enc_ctr;
        let idx = pb.base + 1 + slot as u64;
        let (plain, intended) = if ctr.value() == 0 {
            ([0; 8], PhysicalBlock::ZERO)
        } else {
            let mut live = HashMap::new();
            for s in pb.ch.off(pb.ch.slots[slot]).collect::<Vec<_>>() {
                live.insert(s, self.read_block(pb.base + 1 + s as u64, Traffic::Data)?);
            }
            let (plain, kind) = self.slot_content(pb, slot, &live)?;
            let partial = self.partial_for(&pb.ch, slot, ctr);
            (plain, self.seal_slot_block(pb.id, slot, ctr, &plain, kind, partial))
        };
        let lo = (slot + 1) * BLOCK_BITS;
        let known: Vec<usize> = pb.pointers.iter().filter(|p| (lo..lo + BLOCK_BITS).contains(&p.addr)).map(|p| p.addr - lo).collect();
        let class = self.classify(idx, &intended, &known)?;
        self.note_class(pb.id, lo, class);
        Ok(plain)
    }

    /// Rebuilds metadata from the replica among `blocks` (slot, stored) of
    /// the channel opposite the metadata block. `hint` is an extra counter
    /// guess. Returns the metadata and the pointer values it carries.
    fn meta_from_replica(
        &self,
        id: u64,
        ch: &BucketChannels,
        blocks: &[(usize, PhysicalBlock)],
        hint: Option<EncCtr>,
    ) -> Option<(BucketMetadata, Vec<Pointer>)> {
        let mut shards = [None; SHARDS];
        for (s, b) in blocks {
            shards[ch.shard_of(*s)] = Some(unpack_ecc_area(b.ecc()).1);
        }
        let mut guesses: Vec<EncCtr> = join_encctr(&shards).into_iter().collect();
        guesses.extend(hint.filter(|h| !guesses.contains(h)));
        for ctr in guesses {
            for (s, b) in blocks {
                let plain = self.keys.otp_crypt(id, ctr, *s as u8, &b.data());
                let pointers = BUCKET_ECP.repair_host(&mut PhysicalBlock::new(plain, 0), 0);
                let mut fixed = *b;
                apply_pointers(&mut fixed, (s + 1) * BLOCK_BITS, &pointers);
                if verify_data_block(&self.keys, SlotKind::MetaReplica, id, *s, ctr, &fixed).is_err() {
                    continue;
                }
                let plain = self.keys.otp_crypt(id, ctr, *s as u8, &fixed.data());
                let mut m = BucketMetadata::decode(&PhysicalBlock::new(plain, 0));
                m.enc_ctr = ctr;
                m.replica_meta_offset = *s as u8;
                return Some((m, pointers));
            }
        }
        None
    }

    /// Metadata MAC of bucket `child` as it stands in DRAM; zero when the
    /// bucket was never written or lies beyond the leaves.
    fn current_child_mac(&mut self, child: u64) -> Result<Mac54, SimError> {
        if child >= (1u64 << self.cfg.tree_levels) - 1 {
            return Ok(Mac54::PRISTINE);
        }
        let raw = self.read_block(self.bucket_base(child), Traffic::Meta)?;
        if raw.is_zero() {
            return Ok(Mac54::PRISTINE);
        }
        let mut s = raw;
        BUCKET_ECP.repair_host(&mut s, 0);
        Ok(meta_mac(&self.keys, child, &s))
    }

    /// Seals recovered metadata, rewriting its pointer array exactly as the
    /// last write did.
    fn seal_recovered(&self, id: u64, m: &BucketMetadata, pointers: &[Pointer], pristine: bool) -> PhysicalBlock {
        if pristine {
            return PhysicalBlock::ZERO;
        }
        let mut host = seal_metadata(&self.keys, id, m);
        self.rewrite_ecps(&mut host, m, pointers);
        host
    }

    /// Case 2: rebuilds a metadata block that failed its MAC from the
    /// replica in its slots.
    pub(super) fn recover_metadata(
        &mut self,
        id: u64,
        base: u64,
        ch: &BucketChannels,
        raw: &PhysicalBlock,
        expected: Mac54,
        v: RitViolation,
    ) -> Result<(PhysicalBlock, Vec<Pointer>), SimError> {
        self.stats.detections += 1;
        if !self.cfg.scheme.replication() {
            return Err(self.violation(v));
        }
        self.recovering += 1;
        let r = self.recover_metadata_inner(id, base, ch, raw, expected);
        self.recovering -= 1;
        match r? {
            Some(out) => {
                self.stats.recoveries_case2 += 1;
                Ok(out)
            }
            None => Err(self.violation(v)),
        }
    }

    fn recover_metadata_inner(
        &mut self,
        id: u64,
        base: u64,
        ch: &BucketChannels,
        raw: &PhysicalBlock,
        expected: Mac54,
    ) -> Result<Option<(PhysicalBlock, Vec<Pointer>)>, SimError> {
        let mut blocks = Vec::new();
        for s in ch.off(ch.meta).collect::<Vec<_>>() {
            blocks.push((s, self.read_block(base + 1 + s as u64, Traffic::Data)?));
        }
        let pristine_slots = blocks.iter().all(|(_, b)| b.is_zero());
        let (mut m, pointers) = if pristine_slots {
            (self.fresh_meta(), Vec::new())
        } else {
            match self.meta_from_replica(id, ch, &blocks, Some(BucketMetadata::decode(raw).enc_ctr)) {
                Some(v) => v,
                None => return Ok(None),
            }
        };
        for child in [2 * id + 1, 2 * id + 2] {
            m.child_macs[child_side(child)] = self.current_child_mac(child)?;
        }
        let pristine = pristine_slots && m.child_macs.iter().all(|c| c.is_pristine());
        let stored = self.seal_recovered(id, &m, &pointers, pristine);
        let ok = if expected.is_pristine() { stored.is_zero() } else { meta_mac(&self.keys, id, &stored) == expected };
        if !ok {
            return Ok(None);
        }
        let known: Vec<usize> = pointers.iter().filter(|p| p.addr < BLOCK_BITS).map(|p| p.addr).collect();
        let class = self.classify(base, &stored, &known)?;
        if let FaultClass::Permanent(bits) = &class {
            let cells = bits.iter().filter(|&&b| BUCKET_ECP.in_rotation_field(b)).map(|&b| (b, !stored.bit(b)));
            self.rotation_stuck.entry(id).or_default().extend(cells);
        }
        self.note_class(id, 0, class);
        let pointers = self.pointers_of(&stored);
        Ok(Some((stored, pointers)))
    }

    /// Brings every failed channel back, e.g. at the end of a run when the
    /// failure has not been read yet.
    pub fn sync_failures(&mut self) -> Result<(), SimError> {
        for ch in self.dram.failed_channels() {
            self.recover_channel(ch)?;
        }
        Ok(())
    }

    /// Case 3: swaps in a blank channel and rebuilds its content from the
    /// other one, children before parents.
    pub(super) fn recover_channel(&mut self, dead: u32) -> Result<(), SimError> {
        if !self.cfg.scheme.replication() {
            return Err(SimError::Reliability(format!("channel {dead} lost without replication")));
        }
        if self.dram.failed_channels().len() > 1 {
            return Err(SimError::Reliability("both channels lost".into()));
        }
        self.stats.recoveries_case3 += 1;
        self.recovering += 1;
        self.in_channel_rebuild = true;
        let r = self.rebuild_channel(dead);
        self.in_channel_rebuild = false;
        self.recovering -= 1;
        r
    }

    fn rebuild_channel(&mut self, dead: u32) -> Result<(), SimError> {
        self.dram.replace_channel(dead);
        let live = 1 - dead;
        let spare_owner: HashMap<u32, u64> = self.remap.entries().map(|(b, s)| (s, b)).collect();
        let must_owner: HashMap<u64, u64> = self.must_relocated.iter().map(|(&n, &s)| (s, n)).collect();
        let first_node = self.must.as_ref().map_or(0, |g| g.first_dram_node());
        let mut buckets = BTreeSet::new();
        let mut nodes = BTreeSet::new();
        let stored: Vec<u64> = self.dram.stored_indices().filter(|&i| self.geometry.channel_of(i) == live).collect();
        for i in stored {
            match self.layout.locate(i) {
                Region::Bucket { id, .. } if self.remap.lookup(id).is_none() => {
                    buckets.insert(id);
                }
                Region::RemapSpare { spare, .. } => {
                    if let Some(&id) = spare_owner.get(&(spare as u32)) {
                        buckets.insert(id);
                    }
                }
                Region::Must { pair, .. } if !self.must_relocated.contains_key(&(first_node + pair)) => {
                    nodes.insert(first_node + pair);
                }
                Region::MustSpare { spare, .. } => {
                    if let Some(&n) = must_owner.get(&spare) {
                        nodes.insert(n);
                    }
                }
                _ => {}
            }
        }
        let mut macs: HashMap<u64, Mac54> = HashMap::new();
        for &id in buckets.iter().rev() {
            let mac = self.rebuild_bucket_channel(id, dead, &macs)?;
            macs.insert(id, mac);
        }
        let first = self.layout.first_bucket;
        for id in first..2 * first + 1 {
            let got = macs.get(&id).copied().unwrap_or(Mac54::PRISTINE);
            if got != self.anchors[(id - first) as usize] {
                return Err(self.violation(RitViolation::Metadata { bucket: id }));
            }
        }
        for node in nodes {
            let base = self.must_location(node);
            let b = self.read_block(base + live as u64, Traffic::MustPrimary)?;
            self.write_block(base + dead as u64, &b, Traffic::MustPrimary)?;
        }
        Ok(())
    }

    /// Restores the lost half of one bucket; returns its metadata MAC.
    fn rebuild_bucket_channel(&mut self, id: u64, dead: u32, macs: &HashMap<u64, Mac54>) -> Result<Mac54, SimError> {
        let base = self.bucket_base(id);
        let ch = BucketChannels::at(&self.geometry, base);
        let mut child_macs = [Mac54::PRISTINE; 2];
        for child in [2 * id + 1, 2 * id + 2] {
            child_macs[child_side(child)] = macs.get(&child).copied().unwrap_or(Mac54::PRISTINE);
        }
        let mut live = HashMap::new();
        for s in ch.off(dead).collect::<Vec<_>>() {
            live.insert(s, self.read_block(base + 1 + s as u64, Traffic::Data)?);
        }
        let (meta, stored) = if ch.meta == dead {
            let blocks: Vec<(usize, PhysicalBlock)> = ch.off(ch.meta).map(|s| (s, live[&s])).collect();
            let (mut m, pointers) = if blocks.iter().all(|(_, b)| b.is_zero()) {
                (self.fresh_meta(), Vec::new())
            } else {
                self.meta_from_replica(id, &ch, &blocks, None).ok_or_else(|| self.clone_violation(id))?
            };
            m.child_macs = child_macs;
            let pristine = m.enc_ctr.value() == 0 && child_macs.iter().all(|c| c.is_pristine());
            let stored = self.seal_recovered(id, &m, &pointers, pristine);
            self.write_block(base, &stored, Traffic::Meta)?;
            (m, stored)
        } else {
            let raw = self.read_block(base, Traffic::Meta)?;
            let mut s = raw;
            if !s.is_zero() {
                BUCKET_ECP.repair_host(&mut s, 0);
            }
            let m = if s.is_zero() { self.fresh_meta() } else { open_metadata(&self.keys, id, &s) };
            if m.child_macs != child_macs {
                return Err(self.violation(RitViolation::Metadata { bucket: id }));
            }
            (m, s)
        };
        let mac = if stored.is_zero() { Mac54::PRISTINE } else { meta_mac(&self.keys, id, &stored) };
        if meta.enc_ctr.value() != 0 {
            let pb = PathBucket {
                id,
                level: super::layout::Layout::level_of(id),
                base,
                ch,
                pointers: self.pointers_of(&stored),
                meta,
                stored,
                vr: Default::default(),
                vr_loc: None,
                reshuffle: false,
                rebuild: None,
                read_seed: 0,
                build_seed: 0,
            };
            for s in (0..SLOTS).filter(|&s| ch.slots[s] == dead) {
                let (plain, kind) = self.slot_content(&pb, s, &live)?;
                let partial = self.partial_for(&ch, s, pb.meta.enc_ctr);
                let b = self.seal_slot_block(id, s, pb.meta.enc_ctr, &plain, kind, partial);
                self.write_block(base + 1 + s as u64, &b, Traffic::Data)?;
            }
        }
        Ok(mac)
    }

    fn clone_violation(&self, id: u64) -> SimError {
        SimError::Integrity(RitViolation::Metadata { bucket: id }.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oram::{OramConfig, Scheme};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn payload(x: u64) -> Payload {
        [x, x.wrapping_mul(31), 7, 6, 5, 4, 3, !x]
    }

    /// A warmed-up tree plus the values it should hold.
    fn warm(scheme: Scheme, seed: u64) -> (Oram, HashMap<u32, Payload>) {
        let mut o = Oram::new(OramConfig::toy(scheme, 8, seed)).unwrap();
        let mut shadow = HashMap::new();
        for a in 0..150u32 {
            o.write(a, payload(a as u64)).unwrap();
            shadow.insert(a, payload(a as u64));
        }
        (o, shadow)
    }

    /// DRAM buckets on the path of `addr` that hold encrypted content.
    fn written_buckets(o: &Oram, addr: u32) -> Vec<u64> {
        let leaf = o.leaf_of(addr).unwrap();
        o.layout().path(leaf as u64).into_iter().skip(o.config().cached_levels).filter(|&id| !o.dram().peek(o.bucket_base(id)).is_zero()).collect()
    }

    /// Flips one stored bit of block `offset` of bucket `id`.
    fn flip(o: &mut Oram, id: u64, offset: u64, bit: usize) {
        let index = o.bucket_base(id) + offset;
        let mut b = o.dram().peek(index);
        b.flip_bit(bit);
        o.dram_mut().poke(index, &b);
    }

    #[test]
    fn corrupted_slots_are_restored_from_replicas() {
        let (mut o, shadow) = warm(Scheme::Rimr, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..60 {
            let a = rng.random_range(0..150);
            for id in written_buckets(&o, a) {
                // one bad block per bucket at a time; two would be beyond repair
                let base = o.bucket_base(id);
                if (base..base + 13).any(|i| o.dram().attacked_blocks().contains(&i)) {
                    continue;
                }
                let slot = rng.random_range(0..SLOTS) as u64;
                let bit = rng.random_range(0..512);
                flip(&mut o, id, 1 + slot, bit);
            }
            assert_eq!(o.read(a).unwrap(), shadow[&a]);
        }
        let s = o.stats();
        assert!(s.detections > 0 && s.recoveries_case1 > 0, "{s:?}");
        assert!(o.violations().is_empty());
        assert!(s.recovery_reads > 0);
        for (&a, v) in &shadow {
            assert_eq!(o.read(a).unwrap(), *v);
        }
        o.check_invariants().unwrap();
    }

    #[test]
    fn corrupted_metadata_is_rebuilt() {
        let (mut o, shadow) = warm(Scheme::Rimr, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..60 {
            let a = rng.random_range(0..150);
            let ids = written_buckets(&o, a);
            let id = ids[rng.random_range(0..ids.len())];
            flip(&mut o, id, 0, rng.random_range(80..400));
            assert_eq!(o.read(a).unwrap(), shadow[&a]);
        }
        assert!(o.stats().recoveries_case2 > 0);
        assert!(o.violations().is_empty());
        o.check_invariants().unwrap();
    }

    #[test]
    fn stuck_cells_are_classified_permanent_and_worked_around() {
        let (mut o, shadow) = warm(Scheme::Rimr, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..40 {
            let a = rng.random_range(0..150);
            let ids = written_buckets(&o, a);
            let id = ids[rng.random_range(0..ids.len())];
            let index = o.bucket_base(id) + rng.random_range(0..13);
            let bit = rng.random_range(0..BLOCK_BITS);
            let mut m = PhysicalBlock::ZERO;
            m.set_bit(bit, true);
            let v = if o.dram().peek(index).bit(bit) { PhysicalBlock::ZERO } else { m };
            o.dram_mut().add_stuck(index, &m, &v);
            assert_eq!(o.read(a).unwrap(), shadow[&a]);
        }
        for (&a, v) in &shadow {
            assert_eq!(o.read(a).unwrap(), *v);
        }
        let s = o.stats();
        assert!(s.permanent_errors > 0, "{s:?}");
        assert!(o.violations().is_empty());
        o.check_invariants().unwrap();
    }

    #[test]
    fn lost_channel_is_rebuilt_from_the_other() {
        for dead in [0, 1] {
            let (mut o, mut shadow) = warm(Scheme::Rimr, 4 + dead as u64);
            o.dram_mut().fail_channel(dead);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for i in 0..400u64 {
                let a = rng.random_range(0..200);
                if rng.random_bool(0.3) {
                    o.write(a, payload(i)).unwrap();
                    shadow.insert(a, payload(i));
                } else {
                    assert_eq!(o.read(a).unwrap(), shadow.get(&a).copied().unwrap_or([0; 8]));
                }
            }
            assert_eq!(o.stats().recoveries_case3, 1);
            assert!(o.violations().is_empty());
            o.check_invariants().unwrap();
        }
    }

    #[test]
    fn without_replication_tampering_is_an_integrity_error() {
        let (mut o, _) = warm(Scheme::Rim, 6);
        let id = written_buckets(&o, 10)[0];
        flip(&mut o, id, 0, 200);
        assert!(matches!(o.read(10), Err(SimError::Integrity(_))));
        assert_eq!(o.violations().len(), 1);
        let (mut o, _) = warm(Scheme::Ri, 6);
        for id in written_buckets(&o, 10) {
            for slot in 1..13 {
                flip(&mut o, id, slot, 5);
            }
        }
        assert!(matches!(o.read(10), Err(SimError::Integrity(_))));
        assert_eq!(o.stats().detections, 1);
    }

    #[test]
    fn injected_transients_never_corrupt_results() {
        // a pair of upsets landing on a slot and its replica before either is
        // read cannot be repaired; everything short of that must be
        let mut cfg = OramConfig::toy(Scheme::Rimre, 8, 7);
        cfg.transient_period = 20_000;
        let mut o = Oram::new(cfg).unwrap();
        let mut shadow: HashMap<u32, Payload> = HashMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for i in 0..3000u64 {
            let a = rng.random_range(0..300);
            let r = if rng.random_bool(0.5) {
                shadow.insert(a, payload(i));
                o.write(a, payload(i)).map(|_| ())
            } else {
                o.read(a).map(|v| assert_eq!(v, shadow.get(&a).copied().unwrap_or([0; 8]), "op {i}"))
            };
            if let Err(e) = r {
                assert!(matches!(e, SimError::Integrity(_)), "{e}");
                assert_eq!(o.violations().len(), 1);
                break;
            }
        }
        let s = o.stats();
        assert!(s.injected_transients > 10, "{s:?}");
        assert!(s.recoveries_case1 + s.recoveries_case2 >= 10, "{s:?}");
        assert!(s.transient_errors >= 10);
    }
}
