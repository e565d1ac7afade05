//! Bit-exact layouts of bucket metadata, MUST nodes and the data-slot ECC
//! area. Offsets are LSB-first bit positions inside a 576-bit block; bits
//! `512..576` are the ECC-chip word.
//!
//! Bucket metadata block:
//!
//! | field                 | offset | width        |
//! |-----------------------|--------|--------------|
//! | fbit                  | 0      | 1            |
//! | roffset               | 1      | 3            |
//! | ecp[0..5]             | 4      | 5 x 14       |
//! | address[0..5]         | 74     | 5 x 32       |
//! | path_label[0..5]      | 234    | 5 x 30       |
//! | real_offset[0..5]     | 384    | 5 x 4        |
//! | child_mac[0..2]       | 404    | 2 x 54       |
//! | enc_ctr               | 512    | 60           |
//! | replica_meta_offset   | 572    | 4            |
//!
//! An ECP entry is a 13-bit cell address within the 13-block bucket followed
//! by the 1-bit value. Schemes without ECP keep the 15-bit valid/read-counter
//! set in the first 15 bits of the ECP region instead.

use std::fmt::Write as _;

use crate::block::{mask, PhysicalBlock, BLOCK_BITS, DATA_BITS};
use crate::crypto::{EncCtr, Mac54, CTR_BITS, MAC_BITS, PARTIAL_BITS};

pub const Z: usize = 5;
pub const SLOTS: usize = 12;
/// Blocks per bucket: metadata + slots.
pub const BUCKET_BLOCKS: usize = SLOTS + 1;
pub const BUCKET_BITS: usize = BUCKET_BLOCKS * BLOCK_BITS;

pub const ECP_ADDR_BITS: usize = 13;
pub const ECP_ENTRY_BITS: usize = 14;
pub const ECP_SENTINEL: u16 = 0x1FFF;

const FBIT: usize = 0;
const ROFFSET: usize = 1;
const ROFFSET_W: usize = 3;
pub const ECP_REGION: usize = 4;
pub const ECP_REGION_END: usize = ECP_REGION + Z * ECP_ENTRY_BITS;
const ADDR: usize = 74;
const LABEL: usize = 234;
const LABEL_W: usize = 30;
const OFFS: usize = 384;
const CHILD_MAC: usize = 404;
const ENC_CTR: usize = 512;
const REPLICA_OFF: usize = 572;

/// Bits of the metadata block under the metadata pad.
pub const META_ENCRYPTED: [(usize, usize); 2] = [(ADDR, CHILD_MAC), (REPLICA_OFF, BLOCK_BITS)];

/// One bucket ECP. Entries whose address falls outside the bucket are idle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct EcpEntry {
    pub addr: u16,
    pub value: bool,
}

impl EcpEntry {
    pub const UNUSED: EcpEntry = EcpEntry { addr: ECP_SENTINEL, value: false };

    pub fn is_active(&self) -> bool {
        (self.addr as usize) < BUCKET_BITS
    }

    fn bits(&self) -> u64 {
        (self.addr as u64 & mask(ECP_ADDR_BITS)) | ((self.value as u64) << ECP_ADDR_BITS)
    }

    fn from_bits(v: u64) -> Self {
        EcpEntry { addr: (v & mask(ECP_ADDR_BITS)) as u16, value: (v >> ECP_ADDR_BITS) & 1 == 1 }
    }
}

/// Twelve per-slot "accessed" bits plus a 3-bit read counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct VrSet(u16);

impl VrSet {
    pub const BITS: usize = 15;
    pub const FRESH: VrSet = VrSet(0);

    pub fn from_bits(v: u16) -> Self {
        VrSet(v & 0x7fff)
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn accessed(self, slot: usize) -> bool {
        (self.0 >> slot) & 1 == 1
    }

    pub fn read_ctr(self) -> u8 {
        (self.0 >> SLOTS) as u8 & 7
    }

    /// Marks `slot` consumed and bumps the read counter.
    pub fn consume(&mut self, slot: usize) {
        debug_assert!(!self.accessed(slot));
        let ctr = (self.read_ctr() + 1).min(7) as u16;
        self.0 = (self.0 & 0x0fff) | (1 << slot) | (ctr << SLOTS);
    }

    pub fn accessed_mask(self) -> u16 {
        self.0 & 0x0fff
    }
}

/// Decoded bucket metadata. Address entries hold `logical + 1`; 0 is empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BucketMetadata {
    pub fbit: bool,
    pub roffset: u8,
    /// ECP entries in physical slot order.
    pub ecps: [EcpEntry; Z],
    pub addresses: [u32; Z],
    pub path_labels: [u32; Z],
    pub real_offsets: [u8; Z],
    pub child_macs: [Mac54; 2],
    pub enc_ctr: EncCtr,
    pub replica_meta_offset: u8,
}

impl BucketMetadata {
    /// Fresh metadata with sentinel ECPs, for schemes that use ECPs.
    pub fn empty() -> Self {
        BucketMetadata { ecps: [EcpEntry::UNUSED; Z], ..Default::default() }
    }

    /// Valid/read-counter set stored inline in the ECP region.
    pub fn inline_vr(&self) -> VrSet {
        let mut b = PhysicalBlock::ZERO;
        self.encode_ecp_region(&mut b);
        VrSet::from_bits(b.field(ECP_REGION, VrSet::BITS) as u16)
    }

    pub fn set_inline_vr(&mut self, vr: VrSet) {
        let mut b = PhysicalBlock::ZERO;
        b.set_field(ECP_REGION, VrSet::BITS, vr.bits() as u64);
        self.decode_ecp_region(&b);
    }

    fn encode_ecp_region(&self, b: &mut PhysicalBlock) {
        for (i, e) in self.ecps.iter().enumerate() {
            b.set_field(ECP_REGION + i * ECP_ENTRY_BITS, ECP_ENTRY_BITS, e.bits());
        }
    }

    fn decode_ecp_region(&mut self, b: &PhysicalBlock) {
        for (i, e) in self.ecps.iter_mut().enumerate() {
            *e = EcpEntry::from_bits(b.field(ECP_REGION + i * ECP_ENTRY_BITS, ECP_ENTRY_BITS));
        }
    }

    pub fn encode(&self) -> PhysicalBlock {
        let mut b = PhysicalBlock::ZERO;
        b.set_field(FBIT, 1, self.fbit as u64);
        b.set_field(ROFFSET, ROFFSET_W, self.roffset as u64);
        self.encode_ecp_region(&mut b);
        for i in 0..Z {
            b.set_field(ADDR + 32 * i, 32, self.addresses[i] as u64);
            b.set_field(LABEL + LABEL_W * i, LABEL_W, self.path_labels[i] as u64);
            b.set_field(OFFS + 4 * i, 4, self.real_offsets[i] as u64);
        }
        for (i, m) in self.child_macs.iter().enumerate() {
            b.set_field(CHILD_MAC + MAC_BITS as usize * i, MAC_BITS as usize, m.value());
        }
        b.set_field(ENC_CTR, CTR_BITS as usize, self.enc_ctr.value());
        b.set_field(REPLICA_OFF, 4, self.replica_meta_offset as u64);
        b
    }

    pub fn decode(b: &PhysicalBlock) -> Self {
        let mut m = BucketMetadata { fbit: b.field(FBIT, 1) == 1, roffset: b.field(ROFFSET, ROFFSET_W) as u8, ..Default::default() };
        m.decode_ecp_region(b);
        for i in 0..Z {
            m.addresses[i] = b.field(ADDR + 32 * i, 32) as u32;
            m.path_labels[i] = b.field(LABEL + LABEL_W * i, LABEL_W) as u32;
            m.real_offsets[i] = b.field(OFFS + 4 * i, 4) as u8;
        }
        for (i, c) in m.child_macs.iter_mut().enumerate() {
            *c = Mac54::new(b.field(CHILD_MAC + MAC_BITS as usize * i, MAC_BITS as usize));
        }
        m.enc_ctr = EncCtr::new(b.field(ENC_CTR, CTR_BITS as usize));
        m.replica_meta_offset = b.field(REPLICA_OFF, 4) as u8;
        m
    }

    /// Slot of each valid real entry, in entry order.
    pub fn real_slots(&self) -> impl Iterator<Item = (usize, u8)> + '_ {
        (0..Z).filter(|&i| self.addresses[i] != 0).map(|i| (i, self.real_offsets[i]))
    }

    /// Semantic checks that decoding alone does not enforce.
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = 0u16;
        for (i, off) in self.real_slots() {
            if off as usize >= SLOTS {
                return Err(format!("entry {i}: slot offset {off} out of range"));
            }
            if seen & (1 << off) != 0 {
                return Err(format!("entry {i}: slot {off} used twice"));
            }
            seen |= 1 << off;
        }
        if self.replica_meta_offset as usize >= SLOTS {
            return Err(format!("replica offset {} out of range", self.replica_meta_offset));
        }
        Ok(())
    }
}

/// 12-bit MUST ECP: 10-bit cell address, value, in-use flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct MustEcp {
    pub addr: u16,
    pub value: bool,
    pub in_use: bool,
}

impl MustEcp {
    pub const BITS: usize = 12;

    fn bits(&self) -> u64 {
        (self.addr as u64 & 0x3ff) | ((self.value as u64) << 10) | ((self.in_use as u64) << 11)
    }

    fn from_bits(v: u64) -> Self {
        MustEcp { addr: (v & 0x3ff) as u16, value: (v >> 10) & 1 == 1, in_use: (v >> 11) & 1 == 1 }
    }

    pub fn is_active(&self) -> bool {
        self.in_use && (self.addr as usize) < BLOCK_BITS
    }
}

pub const NONLEAF_ECPS: usize = 3;
pub const NONLEAF_SETS: usize = 7;
pub const NONLEAF_CHILDREN: usize = 8;
pub const LEAF_ECPS: usize = 7;
pub const LEAF_SETS: usize = 31;
pub const IPOFFSET_BITS: usize = 3;

const NL_ROFFSET_W: usize = 2;
pub const NL_ECP: usize = 3;
const NL_VR: usize = NL_ECP + NONLEAF_ECPS * MustEcp::BITS;
const NL_MAC: usize = NL_VR + NONLEAF_SETS * VrSet::BITS;

const LF_ROFFSET_W: usize = 3;
pub const LF_ECP: usize = 4;
const LF_VR: usize = LF_ECP + LEAF_ECPS * MustEcp::BITS;
const LF_IPO: usize = LF_VR + LEAF_SETS * VrSet::BITS;
/// Upper bound on MUST height imposed by the leaf node's spare bits.
pub const MAX_MUST_LEVELS: usize = (BLOCK_BITS - LF_IPO) / IPOFFSET_BITS + 1;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MustNonLeaf {
    pub fbit: bool,
    pub roffset: u8,
    pub ecps: [MustEcp; NONLEAF_ECPS],
    pub vr: [VrSet; NONLEAF_SETS],
    pub child_macs: [Mac54; NONLEAF_CHILDREN],
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MustLeaf {
    pub fbit: bool,
    pub roffset: u8,
    pub ecps: [MustEcp; LEAF_ECPS],
    pub vr: Vec<VrSet>,
    /// One level-order position per ancestor MUST level, top first.
    pub ipoffsets: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MustNode {
    NonLeaf(MustNonLeaf),
    Leaf(MustLeaf),
}

impl MustNode {
    pub fn ecp_layout(leaf: bool) -> (usize, usize, usize) {
        // (region offset, entries, roffset width)
        if leaf {
            (LF_ECP, LEAF_ECPS, LF_ROFFSET_W)
        } else {
            (NL_ECP, NONLEAF_ECPS, NL_ROFFSET_W)
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, MustNode::Leaf(_))
    }

    pub fn vr(&self) -> &[VrSet] {
        match self {
            MustNode::NonLeaf(n) => &n.vr,
            MustNode::Leaf(n) => &n.vr,
        }
    }

    pub fn vr_mut(&mut self) -> &mut [VrSet] {
        match self {
            MustNode::NonLeaf(n) => &mut n.vr,
            MustNode::Leaf(n) => &mut n.vr,
        }
    }

    pub fn ecps(&self) -> &[MustEcp] {
        match self {
            MustNode::NonLeaf(n) => &n.ecps,
            MustNode::Leaf(n) => &n.ecps,
        }
    }

    pub fn ecps_mut(&mut self) -> &mut [MustEcp] {
        match self {
            MustNode::NonLeaf(n) => &mut n.ecps,
            MustNode::Leaf(n) => &mut n.ecps,
        }
    }

    pub fn roffset(&self) -> u8 {
        match self {
            MustNode::NonLeaf(n) => n.roffset,
            MustNode::Leaf(n) => n.roffset,
        }
    }

    pub fn set_roffset(&mut self, r: u8) {
        match self {
            MustNode::NonLeaf(n) => n.roffset = r,
            MustNode::Leaf(n) => n.roffset = r,
        }
    }

    pub fn set_fbit(&mut self, f: bool) {
        match self {
            MustNode::NonLeaf(n) => n.fbit = f,
            MustNode::Leaf(n) => n.fbit = f,
        }
    }

    pub fn empty(leaf: bool, must_levels: usize) -> Self {
        if leaf {
            MustNode::Leaf(MustLeaf { vr: vec![VrSet::FRESH; LEAF_SETS], ipoffsets: vec![0; must_levels.saturating_sub(1)], ..Default::default() })
        } else {
            MustNode::NonLeaf(MustNonLeaf::default())
        }
    }

    pub fn encode(&self) -> PhysicalBlock {
        let mut b = PhysicalBlock::ZERO;
        match self {
            MustNode::NonLeaf(n) => {
                b.set_field(0, 1, n.fbit as u64);
                b.set_field(1, NL_ROFFSET_W, n.roffset as u64);
                for (i, e) in n.ecps.iter().enumerate() {
                    b.set_field(NL_ECP + i * MustEcp::BITS, MustEcp::BITS, e.bits());
                }
                for (i, v) in n.vr.iter().enumerate() {
                    b.set_field(NL_VR + i * VrSet::BITS, VrSet::BITS, v.bits() as u64);
                }
                for (i, m) in n.child_macs.iter().enumerate() {
                    b.set_field(NL_MAC + i * MAC_BITS as usize, MAC_BITS as usize, m.value());
                }
            }
            MustNode::Leaf(n) => {
                assert!(n.vr.len() == LEAF_SETS && n.ipoffsets.len() < MAX_MUST_LEVELS);
                b.set_field(0, 1, n.fbit as u64);
                b.set_field(1, LF_ROFFSET_W, n.roffset as u64);
                for (i, e) in n.ecps.iter().enumerate() {
                    b.set_field(LF_ECP + i * MustEcp::BITS, MustEcp::BITS, e.bits());
                }
                for (i, v) in n.vr.iter().enumerate() {
                    b.set_field(LF_VR + i * VrSet::BITS, VrSet::BITS, v.bits() as u64);
                }
                for (i, p) in n.ipoffsets.iter().enumerate() {
                    b.set_field(LF_IPO + i * IPOFFSET_BITS, IPOFFSET_BITS, *p as u64);
                }
            }
        }
        b
    }

    pub fn decode(b: &PhysicalBlock, leaf: bool, must_levels: usize) -> Self {
        if leaf {
            let mut n = MustLeaf { fbit: b.field(0, 1) == 1, roffset: b.field(1, LF_ROFFSET_W) as u8, ..Default::default() };
            for (i, e) in n.ecps.iter_mut().enumerate() {
                *e = MustEcp::from_bits(b.field(LF_ECP + i * MustEcp::BITS, MustEcp::BITS));
            }
            n.vr = (0..LEAF_SETS).map(|i| VrSet::from_bits(b.field(LF_VR + i * VrSet::BITS, VrSet::BITS) as u16)).collect();
            n.ipoffsets = (0..must_levels.saturating_sub(1)).map(|i| b.field(LF_IPO + i * IPOFFSET_BITS, IPOFFSET_BITS) as u8).collect();
            MustNode::Leaf(n)
        } else {
            let mut n = MustNonLeaf { fbit: b.field(0, 1) == 1, roffset: b.field(1, NL_ROFFSET_W) as u8, ..Default::default() };
            for (i, e) in n.ecps.iter_mut().enumerate() {
                *e = MustEcp::from_bits(b.field(NL_ECP + i * MustEcp::BITS, MustEcp::BITS));
            }
            for (i, v) in n.vr.iter_mut().enumerate() {
                *v = VrSet::from_bits(b.field(NL_VR + i * VrSet::BITS, VrSet::BITS) as u16);
            }
            for (i, m) in n.child_macs.iter_mut().enumerate() {
                *m = Mac54::new(b.field(NL_MAC + i * MAC_BITS as usize, MAC_BITS as usize));
            }
            MustNode::NonLeaf(n)
        }
    }
}

/// Packs the ECC-chip word of a data slot: MAC low, partial counter in the
/// ten most significant bits.
pub fn pack_ecc_area(mac: Mac54, partial_ctr: u16) -> u64 {
    mac.value() | ((partial_ctr as u64 & mask(PARTIAL_BITS as usize)) << MAC_BITS)
}

pub fn unpack_ecc_area(word: u64) -> (Mac54, u16) {
    (Mac54::new(word), (word >> MAC_BITS) as u16)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub name: String,
    pub offset: usize,
    pub width: usize,
}

fn f(name: impl Into<String>, offset: usize, width: usize) -> Field {
    Field { name: name.into(), offset, width }
}

pub fn bucket_layout() -> Vec<Field> {
    let mut v = vec![f("fbit", FBIT, 1), f("roffset", ROFFSET, ROFFSET_W)];
    v.extend((0..Z).map(|i| f(format!("ecp[{i}]"), ECP_REGION + i * ECP_ENTRY_BITS, ECP_ENTRY_BITS)));
    v.extend((0..Z).map(|i| f(format!("address[{i}]"), ADDR + 32 * i, 32)));
    v.extend((0..Z).map(|i| f(format!("path_label[{i}]"), LABEL + LABEL_W * i, LABEL_W)));
    v.extend((0..Z).map(|i| f(format!("real_offset[{i}]"), OFFS + 4 * i, 4)));
    v.extend((0..2).map(|i| f(format!("child_mac[{i}]"), CHILD_MAC + MAC_BITS as usize * i, MAC_BITS as usize)));
    v.push(f("enc_ctr", ENC_CTR, CTR_BITS as usize));
    v.push(f("replica_meta_offset", REPLICA_OFF, 4));
    v
}

pub fn must_nonleaf_layout() -> Vec<Field> {
    let mut v = vec![f("fbit", 0, 1), f("roffset", 1, NL_ROFFSET_W)];
    v.extend((0..NONLEAF_ECPS).map(|i| f(format!("ecp[{i}]"), NL_ECP + i * MustEcp::BITS, MustEcp::BITS)));
    v.extend((0..NONLEAF_SETS).map(|i| f(format!("vr[{i}]"), NL_VR + i * VrSet::BITS, VrSet::BITS)));
    v.extend((0..NONLEAF_CHILDREN).map(|i| f(format!("child_mac[{i}]"), NL_MAC + i * MAC_BITS as usize, MAC_BITS as usize)));
    v
}

pub fn must_leaf_layout(must_levels: usize) -> Vec<Field> {
    let mut v = vec![f("fbit", 0, 1), f("roffset", 1, LF_ROFFSET_W)];
    v.extend((0..LEAF_ECPS).map(|i| f(format!("ecp[{i}]"), LF_ECP + i * MustEcp::BITS, MustEcp::BITS)));
    v.extend((0..LEAF_SETS).map(|i| f(format!("vr[{i}]"), LF_VR + i * VrSet::BITS, VrSet::BITS)));
    v.extend((0..must_levels.saturating_sub(1)).map(|i| f(format!("ipoffset[{i}]"), LF_IPO + i * IPOFFSET_BITS, IPOFFSET_BITS)));
    v
}

pub fn ecc_area_layout() -> Vec<Field> {
    vec![f("mac", DATA_BITS, MAC_BITS as usize), f("partial_ctr", DATA_BITS + MAC_BITS as usize, PARTIAL_BITS as usize)]
}

/// Human-readable listing of every layout, as printed by `--dump-layout`.
pub fn layout_manifest(must_levels: usize) -> String {
    let mut out = String::new();
    let sections = [
        ("bucket_metadata", bucket_layout()),
        ("must_nonleaf", must_nonleaf_layout()),
        ("must_leaf", must_leaf_layout(must_levels)),
        ("data_slot_ecc_area", ecc_area_layout()),
    ];
    for (name, fields) in sections {
        let used: usize = fields.iter().map(|f| f.width).sum();
        let _ = writeln!(out, "[{name}] used={used} padding={}", BLOCK_BITS - used);
        for fl in fields {
            let _ = writeln!(out, "{:<22} {:>3} {:>2}", fl.name, fl.offset, fl.width);
        }
    }
    out
}
