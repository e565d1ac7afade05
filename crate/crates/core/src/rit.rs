//! Integrity tree over bucket metadata.
//!
//! Each metadata block stores the MACs of its two children's stored
//! metadata blocks; the MACs of the topmost DRAM buckets live on chip. Data
//! slots carry their own MAC in the ECC area, bound to the bucket counter
//! that the (verified) metadata block supplies.
//!
//! A child MAC of zero marks a child that was never written; such a child
//! must read as all-zero.

use thiserror::Error;

use crate::block::{Payload, PhysicalBlock};
use crate::codec::{unpack_ecc_area, BucketMetadata, BUCKET_BLOCKS, META_ENCRYPTED};
use crate::crypto::{EncCtr, Keys, Mac54};

/// Bits of the metadata replica payload that carry child MACs; zeroed so
/// the replica does not go stale when only a child changes.
const CHILD_MAC_WORDS: (usize, usize) = (404, 512);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RitViolation {
    #[error("metadata of bucket {bucket} does not match its parent's MAC")]
    Metadata { bucket: u64 },
    #[error("slot {slot} of bucket {bucket} fails its MAC")]
    Data { bucket: u64, slot: usize },
    #[error("MUST node {node} does not match its parent's MAC")]
    Must { node: u64 },
}

/// Tree address of position `pos` (0 = metadata, 1..=12 slots) of a bucket.
pub fn block_address(bucket: u64, pos: usize) -> u64 {
    bucket * BUCKET_BLOCKS as u64 + pos as u64
}

/// Which of the parent's two child-MAC fields covers `child` (heap ids).
pub fn child_side(child: u64) -> usize {
    ((child + 1) & 1) as usize
}

fn meta_pad(keys: &Keys, bucket: u64, ctr: EncCtr) -> PhysicalBlock {
    let pad = keys.pad(bucket, ctr, 0);
    let mut m = PhysicalBlock::ZERO;
    for (start, end) in META_ENCRYPTED {
        for b in start..end {
            if pad.bit(b) {
                m.set_bit(b, true);
            }
        }
    }
    m
}

/// Encodes and encrypts a metadata block. A never-written bucket (counter 0)
/// is stored in the clear, which for empty metadata is all-zero.
pub fn seal_metadata(keys: &Keys, bucket: u64, meta: &BucketMetadata) -> PhysicalBlock {
    let plain = meta.encode();
    if meta.enc_ctr.value() == 0 {
        return plain;
    }
    plain.xor(&meta_pad(keys, bucket, meta.enc_ctr))
}

pub fn open_metadata(keys: &Keys, bucket: u64, stored: &PhysicalBlock) -> BucketMetadata {
    let ctr = BucketMetadata::decode(stored).enc_ctr;
    if ctr.value() == 0 {
        return BucketMetadata::decode(stored);
    }
    BucketMetadata::decode(&stored.xor(&meta_pad(keys, bucket, ctr)))
}

pub fn meta_mac(keys: &Keys, bucket: u64, stored: &PhysicalBlock) -> Mac54 {
    keys.mac_meta(block_address(bucket, 0), stored)
}

/// Checks a stored metadata block against the MAC its parent holds.
pub fn check_metadata(keys: &Keys, bucket: u64, expected: Mac54, stored: &PhysicalBlock) -> Result<(), RitViolation> {
    let ok = if expected.is_pristine() { stored.is_zero() } else { meta_mac(keys, bucket, stored) == expected };
    ok.then_some(()).ok_or(RitViolation::Metadata { bucket })
}

/// Verifies a top-down run of stored metadata blocks; `anchor` is the MAC of
/// the first one. Returns the index of the first block that fails.
pub fn verify_metadata_path(keys: &Keys, anchor: Mac54, path: &[(u64, PhysicalBlock)]) -> Result<(), (usize, RitViolation)> {
    let mut expected = anchor;
    for (i, (bucket, stored)) in path.iter().enumerate() {
        check_metadata(keys, *bucket, expected, stored).map_err(|v| (i, v))?;
        if let Some((child, _)) = path.get(i + 1) {
            expected = open_metadata(keys, *bucket, stored).child_macs[child_side(*child)];
        }
    }
    Ok(())
}

/// Recomputes MACs bottom-up along a top-down path of metadata, storing each
/// child's MAC in its parent before sealing the parent. `seal` turns
/// metadata into its stored block (and may write it out). Returns the stored
/// blocks and the new anchor.
pub fn update_metadata_macs(
    keys: &Keys,
    path: &mut [(u64, BucketMetadata)],
    mut seal: impl FnMut(u64, &BucketMetadata) -> PhysicalBlock,
) -> (Vec<PhysicalBlock>, Mac54) {
    let mut stored = vec![PhysicalBlock::ZERO; path.len()];
    let mut below: Option<(u64, Mac54)> = None;
    for i in (0..path.len()).rev() {
        let (bucket, meta) = &mut path[i];
        if let Some((child, mac)) = below {
            meta.child_macs[child_side(child)] = mac;
        }
        stored[i] = seal(*bucket, meta);
        below = Some((*bucket, meta_mac(keys, *bucket, &stored[i])));
    }
    (stored, below.map(|(_, m)| m).unwrap_or(Mac54::PRISTINE))
}

/// Which MAC domain a slot uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Data,
    MetaReplica,
}

pub fn slot_mac(keys: &Keys, kind: SlotKind, bucket: u64, slot: usize, ctr: EncCtr, ct: &Payload, partial: u16) -> Mac54 {
    let a = block_address(bucket, slot + 1);
    match kind {
        SlotKind::Data => keys.mac_data(a, ctr, ct, partial),
        SlotKind::MetaReplica => keys.mac_meta_replica(a, ctr, ct, partial),
    }
}

/// Encrypts and tags one slot.
pub fn seal_slot(keys: &Keys, kind: SlotKind, bucket: u64, slot: usize, ctr: EncCtr, plain: &Payload, partial: u16) -> PhysicalBlock {
    let ct = keys.otp_crypt(bucket, ctr, slot as u8, plain);
    let mac = slot_mac(keys, kind, bucket, slot, ctr, &ct, partial);
    PhysicalBlock::new(ct, crate::codec::pack_ecc_area(mac, partial))
}

/// Checks the tag of a slot as read (after cell repair).
pub fn verify_data_block(keys: &Keys, kind: SlotKind, bucket: u64, slot: usize, ctr: EncCtr, stored: &PhysicalBlock) -> Result<(), RitViolation> {
    let (mac, partial) = unpack_ecc_area(stored.ecc());
    (slot_mac(keys, kind, bucket, slot, ctr, &stored.data(), partial) == mac).then_some(()).ok_or(RitViolation::Data { bucket, slot })
}

/// Plaintext carried by the metadata replica: the first 512 bits of the
/// encoded metadata with the child MACs cleared.
pub fn meta_replica_payload(meta: &BucketMetadata) -> Payload {
    let mut b = meta.encode();
    b.set_field(CHILD_MAC_WORDS.0, 54, 0);
    b.set_field(CHILD_MAC_WORDS.0 + 54, 54, 0);
    debug_assert_eq!(CHILD_MAC_WORDS.1, 404 + 108);
    b.data()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{EcpEntry, Z};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_meta(rng: &mut ChaCha8Rng) -> BucketMetadata {
        let mut m = BucketMetadata::empty();
        for i in 0..Z {
            if rng.random_bool(0.6) {
                m.addresses[i] = rng.random_range(1..1000);
                m.path_labels[i] = rng.random_range(0..512);
                m.real_offsets[i] = i as u8 * 2;
            }
        }
        m.ecps[0] = EcpEntry { addr: rng.random_range(0..7488), value: rng.random() };
        m.enc_ctr = EncCtr::new(rng.random_range(1..1 << 40));
        m.replica_meta_offset = 1;
        m
    }

    /// A 6-level path (heap ids) with consistent child MACs.
    fn chain(keys: &Keys, rng: &mut ChaCha8Rng) -> (Vec<(u64, PhysicalBlock)>, Mac54) {
        let ids = [0u64, 2, 5, 11, 24, 49];
        let mut path: Vec<(u64, BucketMetadata)> = ids.iter().map(|&i| (i, random_meta(rng))).collect();
        let (stored, anchor) = update_metadata_macs(keys, &mut path, |b, m| seal_metadata(keys, b, m));
        (ids.iter().copied().zip(stored).collect(), anchor)
    }

    #[test]
    fn seal_open_round_trip_and_pristine_is_zero() {
        let keys = Keys::from_seed(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let m = random_meta(&mut rng);
            let s = seal_metadata(&keys, 77, &m);
            assert_eq!(open_metadata(&keys, 77, &s), m);
            assert_ne!(s.field(74, 32), m.encode().field(74, 32));
        }
        assert!(seal_metadata(&keys, 3, &BucketMetadata::default()).is_zero());
    }

    #[test]
    fn untampered_path_verifies() {
        let keys = Keys::from_seed(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (path, anchor) = chain(&keys, &mut rng);
        assert_eq!(verify_metadata_path(&keys, anchor, &path), Ok(()));
    }

    #[test]
    fn every_bit_flip_of_the_leaf_metadata_fails() {
        let keys = Keys::from_seed(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (path, anchor) = chain(&keys, &mut rng);
        let last = path.len() - 1;
        for bit in 0..576 {
            let mut p = path.clone();
            p[last].1.flip_bit(bit);
            assert_eq!(verify_metadata_path(&keys, anchor, &p).unwrap_err().0, last, "bit {bit}");
        }
    }

    #[test]
    fn stale_metadata_is_caught_at_its_level() {
        let keys = Keys::from_seed(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ids = [0u64, 1, 3, 7];
        let mut path: Vec<(u64, BucketMetadata)> = ids.iter().map(|&i| (i, random_meta(&mut rng))).collect();
        let (old, _) = update_metadata_macs(&keys, &mut path, |b, m| seal_metadata(&keys, b, m));
        path[2].1.enc_ctr = path[2].1.enc_ctr.next();
        let (new, anchor) = update_metadata_macs(&keys, &mut path, |b, m| seal_metadata(&keys, b, m));
        let mut replay: Vec<(u64, PhysicalBlock)> = ids.iter().copied().zip(new).collect();
        replay[2].1 = old[2];
        assert_eq!(verify_metadata_path(&keys, anchor, &replay).unwrap_err().0, 2);
    }

    #[test]
    fn sibling_swap_fails() {
        let keys = Keys::from_seed(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = seal_metadata(&keys, 3, &random_meta(&mut rng));
        let b = seal_metadata(&keys, 4, &random_meta(&mut rng));
        let (ma, mb) = (meta_mac(&keys, 3, &a), meta_mac(&keys, 4, &b));
        assert!(check_metadata(&keys, 3, ma, &b).is_err());
        assert!(check_metadata(&keys, 4, mb, &a).is_err());
        assert!(check_metadata(&keys, 3, Mac54::PRISTINE, &a).is_err());
        assert!(check_metadata(&keys, 3, Mac54::PRISTINE, &PhysicalBlock::ZERO).is_ok());
    }

    #[test]
    fn update_costs_one_mac_per_level_and_is_idempotent() {
        let keys = Keys::from_seed(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ids = [0u64, 2, 6, 13, 28];
        let mut path: Vec<(u64, BucketMetadata)> = ids.iter().map(|&i| (i, random_meta(&mut rng))).collect();
        let mut calls = 0;
        let (s1, a1) = update_metadata_macs(&keys, &mut path, |b, m| {
            calls += 1;
            seal_metadata(&keys, b, m)
        });
        assert_eq!(calls, ids.len());
        let (s2, a2) = update_metadata_macs(&keys, &mut path, |b, m| seal_metadata(&keys, b, m));
        assert_eq!((s1, a1), (s2, a2));
    }

    #[test]
    fn data_tags_bind_counter_and_slot() {
        let keys = Keys::from_seed(13);
        let pt = [5u64; 8];
        let c = EncCtr::new(9);
        let blocks: Vec<PhysicalBlock> = (0..12).map(|s| seal_slot(&keys, SlotKind::Data, 40, s, c, &pt, s as u16)).collect();
        for (s, b) in blocks.iter().enumerate() {
            assert!(verify_data_block(&keys, SlotKind::Data, 40, s, c, b).is_ok());
            assert!(verify_data_block(&keys, SlotKind::MetaReplica, 40, s, c, b).is_err());
            assert!(verify_data_block(&keys, SlotKind::Data, 40, s, c.next(), b).is_err());
            for t in (0..12).filter(|&t| t != s) {
                assert!(verify_data_block(&keys, SlotKind::Data, 40, t, c, b).is_err());
            }
        }
        // replay from before re-encryption
        let old = seal_slot(&keys, SlotKind::Data, 40, 3, c, &pt, 0);
        assert!(verify_data_block(&keys, SlotKind::Data, 40, 3, c.next(), &old).is_err());
    }

    #[test]
    fn replica_payload_ignores_child_macs() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut m = random_meta(&mut rng);
        let p = meta_replica_payload(&m);
        m.child_macs = [Mac54::new(123), Mac54::new(456)];
        assert_eq!(meta_replica_payload(&m), p);
        m.addresses[0] ^= 1;
        assert_ne!(meta_replica_payload(&m), p);
    }
}
