//! Counter-mode pads, truncated MACs and the MAC-unit contention model.
//!
//! A seeded stream cipher (ChaCha8) stands in for AES-CTR and a keyed
//! SHA-256 truncated to 54 bits stands in for the GCM tag. Both are behind
//! [`Keys`], so a real block cipher could be swapped in without touching
//! callers.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::block::{Payload, PhysicalBlock, WORDS};

pub const MAC_BITS: u32 = 54;
pub const CTR_BITS: u32 = 60;
pub const PARTIAL_BITS: u32 = 10;

/// 54-bit authentication tag. Tag value 0 is reserved for "never written".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct Mac54(u64);

impl Mac54 {
    pub const PRISTINE: Mac54 = Mac54(0);
    pub const MASK: u64 = (1 << MAC_BITS) - 1;

    pub fn new(v: u64) -> Self {
        Mac54(v & Self::MASK)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn is_pristine(self) -> bool {
        self.0 == 0
    }
}

/// 60-bit per-bucket encryption counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct EncCtr(u64);

impl EncCtr {
    pub const MASK: u64 = (1 << CTR_BITS) - 1;

    pub fn new(v: u64) -> Self {
        EncCtr(v & Self::MASK)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn next(self) -> Self {
        EncCtr::new(self.0 + 1)
    }
}

/// Domain tags keep MACs of different object kinds apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Domain {
    Data = 1,
    MetaReplica = 2,
    Meta = 3,
    Must = 4,
}

#[derive(Clone)]
pub struct Keys {
    enc: [u8; 32],
    mac: Sha256,
}

impl std::fmt::Debug for Keys {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Keys(..)")
    }
}

impl Keys {
    pub fn from_seed(seed: u64) -> Self {
        let derive = |label: &[u8]| -> [u8; 32] {
            let mut h = Sha256::new();
            h.update(label);
            h.update(seed.to_le_bytes());
            let out = h.finalize();
            let mut k = [0u8; 32];
            k.copy_from_slice(&out[..32]);
            k
        };
        let enc = derive(b"iro/enc");
        let mac_key = derive(b"iro/mac");
        let mut mac = Sha256::new();
        mac.update(mac_key);
        Keys { enc, mac }
    }

    /// 576-bit keystream for one block of one bucket generation.
    /// `position` 0 is the metadata block, 1..=12 the slots.
    pub fn pad(&self, bucket_id: u64, ctr: EncCtr, position: u8) -> PhysicalBlock {
        let mut rng = ChaCha8Rng::from_seed(self.enc);
        rng.set_stream((bucket_id << 4) | position as u64);
        rng.set_word_pos(ctr.value() as u128 * 32);
        let mut b = PhysicalBlock::ZERO;
        for w in b.words.iter_mut().take(WORDS) {
            *w = rng.next_u64();
        }
        b
    }

    /// XOR a 512-bit payload with the slot pad. An involution.
    pub fn otp_crypt(&self, bucket_id: u64, ctr: EncCtr, slot_offset: u8, payload: &Payload) -> Payload {
        let pad = self.pad(bucket_id, ctr, slot_offset + 1);
        let mut out = *payload;
        for (o, p) in out.iter_mut().zip(pad.words.iter()) {
            *o ^= p;
        }
        out
    }

    fn tag(&self, domain: Domain, parts: &[&[u8]]) -> Mac54 {
        let mut h = self.mac.clone();
        h.update([domain as u8]);
        for p in parts {
            h.update(p);
        }
        let out = h.finalize();
        let mut v = [0u8; 8];
        v.copy_from_slice(&out[..8]);
        let t = u64::from_le_bytes(v) & Mac54::MASK;
        // zero is reserved for pristine children
        Mac54(if t == 0 { 1 } else { t })
    }

    /// Tag of an encrypted data slot: binds tree address, counter,
    /// ciphertext and the partial counter stored beside it.
    pub fn mac_data(&self, address: u64, ctr: EncCtr, ciphertext: &Payload, partial_ctr: u16) -> Mac54 {
        self.tag(Domain::Data, &[&address.to_le_bytes(), &ctr.value().to_le_bytes(), &payload_bytes(ciphertext), &partial_ctr.to_le_bytes()])
    }

    /// Same shape as [`Keys::mac_data`] for a slot carrying the replica of the
    /// bucket's metadata block. Attackers cannot tell the two apart.
    pub fn mac_meta_replica(&self, address: u64, ctr: EncCtr, ciphertext: &Payload, partial_ctr: u16) -> Mac54 {
        self.tag(Domain::MetaReplica, &[&address.to_le_bytes(), &ctr.value().to_le_bytes(), &payload_bytes(ciphertext), &partial_ctr.to_le_bytes()])
    }

    /// Tag of a metadata block over its full 576 stored bits, kept by the
    /// parent bucket.
    pub fn mac_meta(&self, address: u64, stored: &PhysicalBlock) -> Mac54 {
        self.tag(Domain::Meta, &[&address.to_le_bytes(), &block_bytes(stored)])
    }

    /// Tag of a MUST node over its full 576 bits; both mirror copies share it.
    pub fn mac_must(&self, node_id: u64, stored: &PhysicalBlock) -> Mac54 {
        self.tag(Domain::Must, &[&node_id.to_le_bytes(), &block_bytes(stored)])
    }
}

fn payload_bytes(p: &Payload) -> [u8; 64] {
    let mut out = [0u8; 64];
    for (c, w) in out.chunks_exact_mut(8).zip(p.iter()) {
        c.copy_from_slice(&w.to_le_bytes());
    }
    out
}

fn block_bytes(b: &PhysicalBlock) -> [u8; 72] {
    let mut out = [0u8; 72];
    for (c, w) in out.chunks_exact_mut(8).zip(b.words.iter()) {
        c.copy_from_slice(&w.to_le_bytes());
    }
    out
}

/// Fixed pool of MAC engines, each busy for `latency` cycles per tag.
#[derive(Debug, Clone)]
pub struct MacUnitPool {
    free_at: Vec<u64>,
    latency: u64,
    submissions: u64,
    queue_wait: u64,
}

impl MacUnitPool {
    pub fn new(units: usize, latency: u64) -> Self {
        MacUnitPool { free_at: vec![0; units.max(1)], latency, submissions: 0, queue_wait: 0 }
    }

    /// Returns the completion cycle of a tag computation requested at `now`.
    pub fn submit(&mut self, now: u64) -> u64 {
        let (i, &free) = self.free_at.iter().enumerate().min_by_key(|(_, &t)| t).expect("at least one unit");
        let start = now.max(free);
        self.queue_wait += start - now;
        self.submissions += 1;
        let done = start + self.latency;
        self.free_at[i] = done;
        done
    }

    pub fn units(&self) -> usize {
        self.free_at.len()
    }

    pub fn submissions(&self) -> u64 {
        self.submissions
    }

    /// Total cycles requests spent waiting for a free unit.
    pub fn queue_wait(&self) -> u64 {
        self.queue_wait
    }
}
