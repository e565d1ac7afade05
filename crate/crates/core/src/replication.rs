//! Replica placement inside a bucket's dummy slots and the split 60-bit
//! encryption counter.
//!
//! Every original (the metadata block and each real block) gets one replica
//! in a slot on the other channel. The metadata replica is placed first,
//! then real-block replicas in metadata entry order; each takes the leftmost
//! free slot on the opposite channel. Because placement is a deterministic
//! function of the slot layout, only the metadata replica's offset is stored.

use thiserror::Error;

use crate::codec::{BucketMetadata, SLOTS};
use crate::crypto::{EncCtr, PARTIAL_BITS};
use crate::dram::DramGeometry;

pub const SHARDS: usize = 6;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum ReplicationError {
    #[error("no opposite-channel slot left for the metadata replica")]
    MetaSlot,
    #[error("no opposite-channel slot left for the replica of entry {0}")]
    RealSlot(usize),
    #[error("partial counter shard {0} missing")]
    IncompleteCounter(usize),
}

/// Channel of the metadata block and of each slot of one bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BucketChannels {
    pub meta: u32,
    pub slots: [u32; SLOTS],
}

impl BucketChannels {
    /// Channels of a bucket stored at consecutive block indices from `base`.
    pub fn at(geometry: &DramGeometry, base: u64) -> Self {
        let mut slots = [0; SLOTS];
        for (s, c) in slots.iter_mut().enumerate() {
            *c = geometry.channel_of(base + 1 + s as u64);
        }
        BucketChannels { meta: geometry.channel_of(base), slots }
    }

    /// Slots not on channel `ch`, in slot order.
    pub fn off(&self, ch: u32) -> impl Iterator<Item = usize> + '_ {
        (0..SLOTS).filter(move |&s| self.slots[s] != ch)
    }

    /// Slots on channel `ch`, in slot order.
    pub fn on(&self, ch: u32) -> impl Iterator<Item = usize> + '_ {
        (0..SLOTS).filter(move |&s| self.slots[s] == ch)
    }

    /// Index of the counter shard carried by `slot`: its rank among the
    /// slots of its channel.
    pub fn shard_of(&self, slot: usize) -> usize {
        (0..slot).filter(|&s| self.slots[s] == self.slots[slot]).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotRole {
    /// Original of metadata entry `i`.
    Real(usize),
    /// Replica of metadata entry `i`.
    RealReplica(usize),
    MetaReplica,
    Dummy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaPlan {
    pub meta_replica: usize,
    /// (entry, replica slot) in entry order.
    pub reals: Vec<(usize, usize)>,
}

impl ReplicaPlan {
    pub fn role(&self, meta: &BucketMetadata, slot: usize) -> SlotRole {
        if slot == self.meta_replica {
            return SlotRole::MetaReplica;
        }
        if let Some((i, _)) = meta.real_slots().find(|&(_, o)| o as usize == slot) {
            return SlotRole::Real(i);
        }
        match self.reals.iter().find(|&&(_, r)| r == slot) {
            Some(&(i, _)) => SlotRole::RealReplica(i),
            None => SlotRole::Dummy,
        }
    }

    /// Slot holding the other copy of whatever `slot` holds, if any.
    pub fn counterpart(&self, meta: &BucketMetadata, slot: usize) -> Option<usize> {
        match self.role(meta, slot) {
            SlotRole::Real(i) => self.reals.iter().find(|&&(e, _)| e == i).map(|&(_, r)| r),
            SlotRole::RealReplica(i) => Some(meta.real_offsets[i] as usize),
            _ => None,
        }
    }
}

fn place_reals(ch: &BucketChannels, reals: &[(usize, usize)], mut occupied: u16) -> Result<Vec<(usize, usize)>, ReplicationError> {
    reals
        .iter()
        .map(|&(entry, orig)| {
            let s = ch.off(ch.slots[orig]).find(|&s| occupied & (1 << s) == 0).ok_or(ReplicationError::RealSlot(entry))?;
            occupied |= 1 << s;
            Ok((entry, s))
        })
        .collect()
}

/// Plans replicas for real blocks `reals` given as (entry, slot) in entry
/// order. Slots in `meta_blocked` are unfit for the metadata replica.
pub fn plan_replicas(ch: &BucketChannels, reals: &[(usize, usize)], meta_blocked: u16) -> Result<ReplicaPlan, ReplicationError> {
    let occupied = reals.iter().fold(0u16, |m, &(_, s)| m | 1 << s);
    let meta_replica = ch.off(ch.meta).find(|&s| (occupied | meta_blocked) & (1 << s) == 0).ok_or(ReplicationError::MetaSlot)?;
    let reals = place_reals(ch, reals, occupied | 1 << meta_replica)?;
    Ok(ReplicaPlan { meta_replica, reals })
}

/// Recomputes the plan from trusted metadata.
pub fn locate_replica(meta: &BucketMetadata, ch: &BucketChannels) -> ReplicaPlan {
    let reals: Vec<(usize, usize)> = meta.real_slots().map(|(i, o)| (i, o as usize)).collect();
    let meta_replica = meta.replica_meta_offset as usize;
    let occupied = reals.iter().fold(1u16 << meta_replica, |m, &(_, s)| m | 1 << s);
    // a valid metadata block always admits a placement
    let reals = place_reals(ch, &reals, occupied).unwrap_or_default();
    ReplicaPlan { meta_replica, reals }
}

pub fn split_encctr(ctr: EncCtr) -> [u16; SHARDS] {
    let mut out = [0; SHARDS];
    for (i, s) in out.iter_mut().enumerate() {
        *s = ((ctr.value() >> (PARTIAL_BITS as usize * i)) & ((1 << PARTIAL_BITS) - 1)) as u16;
    }
    out
}

pub fn join_encctr(shards: &[Option<u16>; SHARDS]) -> Result<EncCtr, ReplicationError> {
    let mut v = 0u64;
    for (i, s) in shards.iter().enumerate() {
        let s = s.ok_or(ReplicationError::IncompleteCounter(i))?;
        v |= ((s as u64) & ((1 << PARTIAL_BITS) - 1)) << (PARTIAL_BITS as usize * i);
    }
    Ok(EncCtr::new(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn alternating(meta: u32) -> BucketChannels {
        let mut slots = [0; SLOTS];
        for (s, c) in slots.iter_mut().enumerate() {
            *c = (meta + 1 + s as u32) % 2;
        }
        BucketChannels { meta, slots }
    }

    #[test]
    fn channels_of_a_bucket_split_evenly() {
        let g = DramGeometry::default();
        for base in [0u64, 13, 26, 1001] {
            let ch = BucketChannels::at(&g, base);
            assert_eq!(ch.on(0).count(), 6);
            assert_eq!(ch.on(1).count(), 6);
            assert_eq!((0..SLOTS).map(|s| ch.shard_of(s)).filter(|&r| r == 5).count(), 2);
        }
    }

    #[test]
    fn figure_scenario_metadata_on_channel_one() {
        // metadata on channel 1: slots 0,2,4.. are channel 0
        let ch = alternating(1);
        assert_eq!(ch.slots[0], 0);
        // block A in slot 2 (channel 0)
        let plan = plan_replicas(&ch, &[(0, 2)], 0).unwrap();
        assert_eq!(plan.meta_replica, 0, "first channel-0 slot");
        assert_eq!(plan.reals, vec![(0, 1)], "first channel-1 slot");
    }

    #[test]
    fn no_reals_only_metadata_replica() {
        let ch = alternating(0);
        let plan = plan_replicas(&ch, &[], 0).unwrap();
        assert_eq!(plan.meta_replica, 0);
        assert!(plan.reals.is_empty());
        let plan = plan_replicas(&ch, &[], 0b1).unwrap();
        assert_eq!(plan.meta_replica, 2);
    }

    #[test]
    fn locate_reproduces_plan_and_keeps_channels_disjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20_000 {
            let ch = alternating(trial % 2);
            let n = rng.random_range(0..=5);
            let mut perm: Vec<usize> = (0..SLOTS).collect();
            perm.shuffle(&mut rng);
            let reals: Vec<(usize, usize)> = (0..n).map(|i| (i, perm[i])).collect();
            let plan = plan_replicas(&ch, &reals, 0).unwrap();
            let mut meta = BucketMetadata::empty();
            for &(i, s) in &reals {
                meta.addresses[i] = 100 + i as u32;
                meta.real_offsets[i] = s as u8;
            }
            meta.replica_meta_offset = plan.meta_replica as u8;
            assert_eq!(locate_replica(&meta, &ch), plan);
            assert_ne!(ch.slots[plan.meta_replica], ch.meta);
            let mut used = 1u16 << plan.meta_replica;
            for (&(e, r), &(_, o)) in plan.reals.iter().zip(&reals) {
                assert_eq!(plan.counterpart(&meta, o), Some(r));
                assert_eq!(plan.role(&meta, r), SlotRole::RealReplica(e));
                assert_ne!(ch.slots[r], ch.slots[o]);
                assert_eq!(used & (1 << r), 0);
                used |= 1 << r | 1 << o;
            }
            assert_eq!(used.count_ones() as usize, 1 + 2 * n);
        }
    }

    #[test]
    fn counter_shards_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for x in [0u64, 1, EncCtr::MASK].into_iter().chain((0..1000).map(|_| rng.random::<u64>())) {
            let c = EncCtr::new(x);
            let s = split_encctr(c);
            assert_eq!(join_encctr(&s.map(Some)).unwrap(), c);
        }
    }

    #[test]
    fn counter_survives_losing_a_channel() {
        let ch = alternating(0);
        let ctr = EncCtr::new(0x0abc_def0_1234_5678);
        let shards = split_encctr(ctr);
        // every slot stores the shard of its rank; channel 0 is dead
        let mut seen = [None; SHARDS];
        for s in ch.on(1) {
            seen[ch.shard_of(s)] = Some(shards[ch.shard_of(s)]);
        }
        assert_eq!(join_encctr(&seen).unwrap(), ctr);
        seen[3] = None;
        assert_eq!(join_encctr(&seen), Err(ReplicationError::IncompleteCounter(3)));
    }
}
