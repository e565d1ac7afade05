use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layout::Layout;
use super::timing::Clock;
use super::{OramConfig, Scheme, SimError, S};
use crate::block::{Payload, PhysicalBlock, BLOCK_BITS};
use crate::codec::{pack_ecc_area, BucketMetadata, EcpEntry, MustNode, VrSet, SLOTS, Z};
use crate::crypto::{EncCtr, Keys, Mac54};
use crate::dram::{map_address, Dram, DramGeometry, FaultKind, FaultRecord};
use crate::ecp::{Assignment, Pointer, RemapTable, BUCKET_ECP};
use crate::must::{MustGeometry, VrLocation};
use crate::replication::{locate_replica, plan_replicas, split_encctr, BucketChannels, ReplicaPlan};
use crate::rit::{child_side, meta_mac, meta_replica_payload, open_metadata, seal_metadata, slot_mac, verify_data_block, RitViolation, SlotKind};
use crate::stats::{Counters, StatsReport, SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Read,
    Write(Payload),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum Traffic {
    Meta,
    Data,
    MustPrimary,
    MustMirror,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) struct Resident {
    pub addr: u32,
    pub leaf: u32,
    pub data: Payload,
}

#[derive(Debug, Clone, Copy)]
pub(super) struct StashEntry {
    pub leaf: u32,
    pub data: Payload,
}

/// One DRAM bucket of the path being worked on.
#[derive(Debug, Clone)]
pub(super) struct PathBucket {
    pub id: u64,
    pub level: usize,
    pub base: u64,
    pub ch: BucketChannels,
    pub meta: BucketMetadata,
    /// Metadata block as intended (after cell repair).
    pub stored: PhysicalBlock,
    pub pointers: Vec<Pointer>,
    pub vr: VrSet,
    pub vr_loc: Option<VrLocation>,
    pub reshuffle: bool,
    pub rebuild: Option<Vec<Resident>>,
    pub read_seed: u64,
    pub build_seed: u64,
}

impl PathBucket {
    pub fn plan(&self) -> Option<ReplicaPlan> {
        (self.meta.enc_ctr.value() != 0).then(|| locate_replica(&self.meta, &self.ch))
    }

    fn real_mask(&self) -> u16 {
        self.meta.real_slots().fold(0, |m, (_, o)| m | 1 << o)
    }

    fn find(&self, addr: u32) -> Option<(usize, usize)> {
        self.meta.real_slots().find(|&(i, o)| self.meta.addresses[i] == addr + 1 && !self.vr.accessed(o as usize)).map(|(i, o)| (i, o as usize))
    }
}

/// A DRAM MUST node held while its path is in flight.
#[derive(Debug, Clone)]
pub(super) struct MustCursor {
    pub node: u64,
    pub block: MustNode,
}

/// Ring ORAM controller over a simulated DRAM.
#[derive(Clone)]
pub struct Oram {
    pub(super) cfg: OramConfig,
    pub(super) layout: Layout,
    pub(super) geometry: DramGeometry,
    pub(super) must: Option<MustGeometry>,
    pub(super) keys: Keys,
    pub(super) dram: Dram,
    rng: ChaCha8Rng,
    fault_rng: ChaCha8Rng,
    posmap: HashMap<u32, u32>,
    stash: BTreeMap<u32, StashEntry>,
    /// On-chip buckets of the cached levels, by heap id.
    cached: Vec<Vec<Resident>>,
    /// MACs of the topmost DRAM buckets.
    pub(super) anchors: Vec<Mac54>,
    pub(super) must_cached: Vec<MustNode>,
    pub(super) must_anchor: HashMap<u64, Mac54>,
    pub(super) must_faults: HashMap<u64, Vec<usize>>,
    pub(super) must_relocated: HashMap<u64, u64>,
    pub(super) must_spares_used: u64,
    pub(super) must_path: Vec<MustCursor>,
    pub(super) must_copy: u64,
    /// Newly found stuck cells per bucket, in bucket bit addresses.
    pub(super) pending: HashMap<u64, Vec<usize>>,
    /// Stuck cells of a bucket's rotation field and the level they hold.
    pub(super) rotation_stuck: HashMap<u64, Vec<(usize, bool)>>,
    pub(super) remap: RemapTable,
    pub(super) clock: Clock,
    pub(super) stats: Counters,
    pub(super) violations: Vec<RitViolation>,
    pub(super) recovering: u32,
    pub(super) in_channel_rebuild: bool,
    evict_ctr: u64,
    next_transient: u64,
    stash_peak: usize,
    last_leaf: u32,
}

impl std::fmt::Debug for Oram {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Oram").field("scheme", &self.cfg.scheme).field("layout", &self.layout).field("stash", &self.stash.len()).finish()
    }
}

fn bit_reverse(x: u64, bits: usize) -> u64 {
    if bits == 0 {
        0
    } else {
        x.reverse_bits() >> (64 - bits)
    }
}

impl Oram {
    pub fn new(cfg: OramConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let must = if cfg.scheme.must() { Some(MustGeometry::derive(cfg.tree_levels, cfg.cached_levels, cfg.leaf_span, cfg.nonleaf_span)?) } else { None };
        let pairs = must.as_ref().map_or(0, |m| m.dram_nodes());
        let spares = if must.is_some() { cfg.must_spares } else { 0 };
        let (layout, geometry) = Layout::new(cfg.tree_levels, cfg.cached_levels, pairs, spares, cfg.remap_capacity as u64, cfg.dram);
        if geometry.channels != 2 {
            return Err(SimError::Config("the controller drives exactly two channels".into()));
        }
        let dram = Dram::new(geometry, cfg.seed ^ 0x5eed_d4a3)?;
        let must_cached = must.as_ref().map_or(Vec::new(), |m| (0..m.first_dram_node()).map(|n| MustNode::empty(m.is_leaf_node(n), m.must_levels)).collect());
        let mut seeder = ChaCha8Rng::seed_from_u64(cfg.seed);
        let keys = Keys::from_seed(seeder.next_u64());
        let rng = ChaCha8Rng::seed_from_u64(seeder.next_u64());
        let fault_rng = ChaCha8Rng::seed_from_u64(seeder.next_u64());
        Ok(Oram {
            layout,
            geometry,
            keys,
            dram,
            rng,
            fault_rng,
            posmap: HashMap::new(),
            stash: BTreeMap::new(),
            cached: vec![Vec::new(); (1usize << cfg.cached_levels) - 1],
            anchors: vec![Mac54::PRISTINE; 1 << cfg.cached_levels],
            must_cached,
            must_anchor: HashMap::new(),
            must_faults: HashMap::new(),
            must_relocated: HashMap::new(),
            must_spares_used: 0,
            must_path: Vec::new(),
            must_copy: 0,
            pending: HashMap::new(),
            rotation_stuck: HashMap::new(),
            remap: RemapTable::new(cfg.remap_capacity),
            clock: Clock::new(geometry.channels as usize, cfg.block_ticks, cfg.mac_units, cfg.mac_latency),
            stats: Counters::default(),
            violations: Vec::new(),
            recovering: 0,
            in_channel_rebuild: false,
            evict_ctr: 0,
            next_transient: cfg.transient_period,
            stash_peak: 0,
            last_leaf: 0,
            must,
            cfg,
        })
    }

    pub fn config(&self) -> &OramConfig {
        &self.cfg
    }

    pub fn scheme(&self) -> Scheme {
        self.cfg.scheme
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn geometry(&self) -> &DramGeometry {
        &self.geometry
    }

    pub fn must_geometry(&self) -> Option<&MustGeometry> {
        self.must.as_ref()
    }

    pub fn dram(&self) -> &Dram {
        &self.dram
    }

    pub fn dram_mut(&mut self) -> &mut Dram {
        &mut self.dram
    }

    pub fn stats(&self) -> &Counters {
        &self.stats
    }

    pub fn violations(&self) -> &[RitViolation] {
        &self.violations
    }

    pub fn remap(&self) -> &RemapTable {
        &self.remap
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn stash_len(&self) -> usize {
        self.stash.len()
    }

    /// Leaf read by the most recent read path.
    pub fn last_leaf(&self) -> u32 {
        self.last_leaf
    }

    pub fn leaf_of(&self, addr: u32) -> Option<u32> {
        self.posmap.get(&addr).copied()
    }

    /// DRAM index of bucket `id`'s metadata block; its slots follow.
    pub fn bucket_location(&self, id: u64) -> u64 {
        self.bucket_base(id)
    }

    /// DRAM index of the primary copy of MUST node `node`, if that node
    /// lives in DRAM. The mirror copy is the next block.
    pub fn must_node_location(&self, node: u64) -> Option<u64> {
        let g = self.must.as_ref()?;
        (node >= g.first_dram_node() && node < g.total_nodes()).then(|| self.must_location(node))
    }

    /// Which MUST copy (0 primary, 1 mirror) the next access reads.
    pub fn next_must_copy(&self) -> u64 {
        if self.cfg.scheme.replication() {
            self.must_copy ^ 1
        } else {
            0
        }
    }

    /// DRAM MUST nodes covering the path to `leaf`, root side first.
    pub fn must_nodes_on_path(&self, leaf: u32) -> Vec<u64> {
        let Some(g) = &self.must else { return Vec::new() };
        g.pmeta_to_must_path(leaf as u64).nodes.iter().map(|n| n.node).filter(|&n| n >= g.first_dram_node()).collect()
    }

    pub fn keys(&self) -> &Keys {
        &self.keys
    }

    pub fn report(&self) -> StatsReport {
        let s = self.stats.clone();
        let (reads, writes) = (s.block_reads(), s.block_writes());
        let total = (reads + writes).max(1) as f64;
        StatsReport {
            schema_version: SCHEMA_VERSION,
            scheme: self.cfg.scheme.to_string(),
            seed: self.cfg.seed,
            tree_levels: self.cfg.tree_levels,
            ops: s.accesses,
            early_reshuffle_pct: if s.read_paths == 0 { 0.0 } else { s.early_reshuffles as f64 / s.read_paths as f64 },
            recovery_overhead: (s.recovery_reads + s.recovery_writes) as f64 / total,
            block_reads: reads,
            block_writes: writes,
            mac_submissions: self.clock.mac_submissions(),
            mac_queue_wait: self.clock.mac_queue_wait(),
            ticks: self.clock.now(),
            stash_peak: self.stash_peak,
            counters: s,
        }
    }

    pub(super) fn ecp(&self) -> bool {
        self.cfg.scheme.replication()
    }

    fn leaf_bits(&self) -> usize {
        self.cfg.tree_levels - 1
    }

    fn random_leaf(&mut self) -> u32 {
        (self.rng.next_u64() & ((1u64 << self.leaf_bits()) - 1)) as u32
    }

    // ---- block I/O ----

    fn count(&mut self, kind: Traffic, write: bool) {
        let s = &mut self.stats;
        let c = if self.recovering > 0 {
            if write {
                &mut s.recovery_writes
            } else {
                &mut s.recovery_reads
            }
        } else {
            match (kind, write) {
                (Traffic::Meta, false) => &mut s.meta_reads,
                (Traffic::Meta, true) => &mut s.meta_writes,
                (Traffic::Data, false) => &mut s.data_reads,
                (Traffic::Data, true) => &mut s.data_writes,
                (Traffic::MustPrimary, false) => &mut s.must_primary_reads,
                (Traffic::MustPrimary, true) => &mut s.must_primary_writes,
                (Traffic::MustMirror, false) => &mut s.must_mirror_reads,
                (Traffic::MustMirror, true) => &mut s.must_mirror_writes,
            }
        };
        *c += 1;
    }

    /// Reads one block; a read that finds its channel dead rebuilds the
    /// channel first.
    pub(super) fn read_block(&mut self, index: u64, kind: Traffic) -> Result<PhysicalBlock, SimError> {
        self.count(kind, false);
        self.clock.transfer(self.geometry.channel_of(index));
        let r = self.dram.read(index)?;
        if !r.channel_failed {
            return Ok(r.block);
        }
        if self.in_channel_rebuild {
            return Err(SimError::Reliability("second channel lost during a rebuild".into()));
        }
        self.recover_channel(self.geometry.channel_of(index))?;
        let r = self.dram.read(index)?;
        if r.channel_failed {
            return Err(SimError::Reliability("channel still failed after rebuild".into()));
        }
        Ok(r.block)
    }

    pub(super) fn write_block(&mut self, index: u64, block: &PhysicalBlock, kind: Traffic) -> Result<(), SimError> {
        self.count(kind, true);
        self.clock.transfer(self.geometry.channel_of(index));
        self.dram.write(index, block)?;
        Ok(())
    }

    pub(super) fn bucket_base(&self, id: u64) -> u64 {
        match self.remap.lookup(id) {
            Some(spare) => self.layout.spare_base(spare),
            None => self.layout.bucket_base(id),
        }
    }

    /// Metadata of a bucket that was never written.
    pub(super) fn fresh_meta(&self) -> BucketMetadata {
        let mut m = BucketMetadata::empty();
        if !self.cfg.scheme.must() {
            m.set_inline_vr(VrSet::FRESH);
        }
        m
    }

    /// Expected MAC of a bucket's metadata: the on-chip anchor for the top
    /// DRAM level, otherwise the parent's child field.
    fn anchor_index(&self, id: u64) -> Option<usize> {
        let first = self.layout.first_bucket;
        (id >= first && id < 2 * first + 1).then(|| (id - first) as usize)
    }

    // ---- slot sealing ----

    pub(super) fn partial_for(&self, ch: &BucketChannels, slot: usize, ctr: EncCtr) -> u16 {
        if self.cfg.scheme.replication() {
            split_encctr(ctr)[ch.shard_of(slot)]
        } else {
            0
        }
    }

    pub(super) fn seal_slot_block(&self, id: u64, slot: usize, ctr: EncCtr, plain: &Payload, kind: SlotKind, partial: u16) -> PhysicalBlock {
        let ct = self.keys.otp_crypt(id, ctr, slot as u8, plain);
        if !self.cfg.scheme.integrity() {
            return PhysicalBlock::new(ct, 0);
        }
        let mac = slot_mac(&self.keys, kind, id, slot, ctr, &ct, partial);
        PhysicalBlock::new(ct, pack_ecc_area(mac, partial))
    }

    /// Writes the ECP array described by `meta.ecps` into a freshly sealed
    /// host. Pointers into data slots keep the values in `old`.
    pub(super) fn rewrite_ecps(&self, host: &mut PhysicalBlock, meta: &BucketMetadata, old: &[Pointer]) {
        let n = BUCKET_ECP.entries;
        let r = meta.roffset as usize % n;
        let targets = (0..n)
            .map(|j| {
                let e: EcpEntry = meta.ecps[(j + r) % n];
                e.is_active().then_some(e.addr as usize)
            })
            .collect();
        let a = Assignment { roffset: r as u8, targets };
        BUCKET_ECP.write(host, 0, &a, |addr| old.iter().find(|p| p.addr == addr).is_some_and(|p| p.value));
    }

    pub(super) fn pointers_of(&self, stored: &PhysicalBlock) -> Vec<Pointer> {
        if self.ecp() && !stored.is_zero() {
            BUCKET_ECP.repair_host(&mut stored.clone(), 0)
        } else {
            Vec::new()
        }
    }

    // ---- path loading ----

    /// Checks a raw metadata block against its expected MAC, repairing
    /// stuck cells first. Returns the intended block and its pointers.
    pub(super) fn check_meta(&self, id: u64, raw: &PhysicalBlock, expected: Mac54) -> Result<(PhysicalBlock, Vec<Pointer>), RitViolation> {
        if !self.cfg.scheme.integrity() {
            return Ok((*raw, Vec::new()));
        }
        if expected.is_pristine() {
            return if raw.is_zero() { Ok((*raw, Vec::new())) } else { Err(RitViolation::Metadata { bucket: id }) };
        }
        let mut s = *raw;
        let pointers = if self.ecp() { BUCKET_ECP.repair_host(&mut s, 0) } else { Vec::new() };
        if meta_mac(&self.keys, id, &s) == expected {
            Ok((s, pointers))
        } else {
            Err(RitViolation::Metadata { bucket: id })
        }
    }

    fn load_bucket(&mut self, id: u64, expected: Mac54) -> Result<PathBucket, SimError> {
        let base = self.bucket_base(id);
        let ch = BucketChannels::at(&self.geometry, base);
        let raw = self.read_block(base, Traffic::Meta)?;
        if self.cfg.scheme.integrity() {
            self.clock.critical_mac();
        }
        let (stored, pointers) = match self.check_meta(id, &raw, expected) {
            Ok(v) => v,
            Err(v) => self.recover_metadata(id, base, &ch, &raw, expected, v)?,
        };
        let meta = if stored.is_zero() { self.fresh_meta() } else { open_metadata(&self.keys, id, &stored) };
        Ok(PathBucket {
            id,
            level: Layout::level_of(id),
            base,
            ch,
            vr: if self.cfg.scheme.must() { VrSet::FRESH } else { meta.inline_vr() },
            meta,
            stored,
            pointers,
            vr_loc: None,
            reshuffle: false,
            rebuild: None,
            read_seed: 0,
            build_seed: 0,
        })
    }

    /// Reads and verifies the metadata (and MUST nodes) of the DRAM part of
    /// the path to `leaf`.
    fn load_path(&mut self, leaf: u32) -> Result<Vec<PathBucket>, SimError> {
        let ids = self.layout.path(leaf as u64);
        let mut path: Vec<PathBucket> = Vec::with_capacity(ids.len());
        for &id in &ids[self.cfg.cached_levels..] {
            let expected = match path.last() {
                Some(p) => p.meta.child_macs[child_side(id)],
                None => self.anchors[self.anchor_index(id).expect("top DRAM level")],
            };
            let pb = self.load_bucket(id, expected)?;
            path.push(pb);
        }
        if self.cfg.scheme.must() {
            self.must_load(leaf as u64)?;
            let g = self.must.expect("must geometry");
            for pb in path.iter_mut() {
                let loc = g.locate(pb.level, Layout::index_in_level(pb.id));
                pb.vr = self.vr_get(&loc);
                pb.vr_loc = Some(loc);
            }
        }
        for pb in path.iter_mut() {
            pb.read_seed = self.rng.next_u64();
            pb.build_seed = self.rng.next_u64();
            if self.pending.contains_key(&pb.id) {
                pb.reshuffle = true;
                self.stats.repair_reshuffles += 1;
            }
        }
        self.clock.flush();
        Ok(path)
    }

    // ---- slot reads ----

    /// Reads one slot, verifies it and returns its plaintext.
    fn read_slot(&mut self, pb: &mut PathBucket, slot: usize) -> Result<Payload, SimError> {
        let idx = pb.base + 1 + slot as u64;
        let raw = self.read_block(idx, Traffic::Data)?;
        let ctr = pb.meta.enc_ctr;
        if !self.cfg.scheme.integrity() {
            return Ok(if ctr.value() == 0 { [0; 8] } else { self.keys.otp_crypt(pb.id, ctr, slot as u8, &raw.data()) });
        }
        self.clock.critical_mac();
        if ctr.value() == 0 {
            if raw.is_zero() {
                return Ok([0; 8]);
            }
            return self.recover_slot(pb, slot);
        }
        let mut stored = raw;
        if self.ecp() {
            crate::ecp::apply_pointers(&mut stored, (slot + 1) * BLOCK_BITS, &pb.pointers);
        }
        let kind = match pb.plan() {
            Some(p) if self.cfg.scheme.replication() && p.meta_replica == slot => SlotKind::MetaReplica,
            _ => SlotKind::Data,
        };
        if verify_data_block(&self.keys, kind, pb.id, slot, ctr, &stored).is_ok() {
            Ok(self.keys.otp_crypt(pb.id, ctr, slot as u8, &stored.data()))
        } else {
            self.recover_slot(pb, slot)
        }
    }

    /// Reads `Z` unread slots: every valid real block plus random others.
    fn read_valid(&mut self, pb: &mut PathBucket) -> Result<Vec<Resident>, SimError> {
        let reals = pb.real_mask();
        let unread: Vec<usize> = (0..SLOTS).filter(|&s| !pb.vr.accessed(s)).collect();
        let mut chosen: Vec<usize> = unread.iter().copied().filter(|&s| reals & (1 << s) != 0).collect();
        let mut others: Vec<usize> = unread.iter().copied().filter(|&s| reals & (1 << s) == 0).collect();
        let mut lrng = ChaCha8Rng::seed_from_u64(pb.read_seed);
        others.shuffle(&mut lrng);
        let fill = Z.saturating_sub(chosen.len());
        chosen.extend(others.into_iter().take(fill));
        chosen.sort_unstable();
        let mut out = Vec::new();
        for s in chosen {
            let data = self.read_slot(pb, s)?;
            if let Some((i, _)) = pb.meta.real_slots().find(|&(_, o)| o as usize == s) {
                out.push(Resident { addr: pb.meta.addresses[i] - 1, leaf: pb.meta.path_labels[i], data });
            }
        }
        Ok(out)
    }

    /// Slot to read when the target is not in this bucket: an unread slot
    /// without a valid real block, else any unread slot.
    fn pick_dummy(pb: &PathBucket, r: u64) -> usize {
        let reals = pb.real_mask();
        let free: Vec<usize> = (0..SLOTS).filter(|&s| !pb.vr.accessed(s) && reals & (1 << s) == 0).collect();
        if !free.is_empty() {
            return free[(r % free.len() as u64) as usize];
        }
        let any: Vec<usize> = (0..SLOTS).filter(|&s| !pb.vr.accessed(s)).collect();
        any.get((r % any.len().max(1) as u64) as usize).copied().unwrap_or(0)
    }

    // ---- protocol ----

    /// Reads `addr`, returning its value, and optionally replaces it.
    pub fn access(&mut self, addr: u32, op: Op) -> Result<Payload, SimError> {
        if addr as u64 >= self.cfg.logical_capacity() || addr == u32::MAX {
            return Err(SimError::Config(format!("address {addr:#x} beyond logical capacity {}", self.cfg.logical_capacity())));
        }
        let fallback = self.random_leaf();
        let fresh = self.random_leaf();
        let leaf = self.posmap.get(&addr).copied().unwrap_or(fallback);
        self.read_path(leaf, Some(addr))?;
        let e = self.stash.entry(addr).or_insert(StashEntry { leaf: fresh, data: [0; 8] });
        let old = e.data;
        e.leaf = fresh;
        if let Op::Write(d) = op {
            e.data = d;
        }
        self.posmap.insert(addr, fresh);
        self.stats.accesses += 1;
        if self.stats.accesses.is_multiple_of(self.cfg.evict_rate) {
            self.evict()?;
        }
        self.relieve()?;
        self.inject_transients()?;
        self.stash_peak = self.stash_peak.max(self.stash.len());
        if self.stash.len() > self.cfg.stash_capacity {
            return Err(SimError::StashOverflow(self.stash.len()));
        }
        Ok(old)
    }

    pub fn read(&mut self, addr: u32) -> Result<Payload, SimError> {
        self.access(addr, Op::Read)
    }

    pub fn write(&mut self, addr: u32, data: Payload) -> Result<Payload, SimError> {
        self.access(addr, Op::Write(data))
    }

    /// A read path to a random leaf with no target.
    pub fn dummy_access(&mut self) -> Result<(), SimError> {
        let leaf = self.random_leaf();
        self.stats.dummy_accesses += 1;
        self.read_path(leaf, None)
    }

    fn relieve(&mut self) -> Result<(), SimError> {
        let cap = self.cfg.stash_capacity as f64;
        if (self.stash.len() as f64) <= self.cfg.relief_high * cap {
            return Ok(());
        }
        let mut rounds = 0;
        while (self.stash.len() as f64) >= self.cfg.relief_low * cap {
            self.dummy_access()?;
            self.evict()?;
            rounds += 1;
            if rounds > 64 * self.cfg.tree_levels {
                return Err(SimError::StashOverflow(self.stash.len()));
            }
        }
        Ok(())
    }

    fn read_path(&mut self, leaf: u32, target: Option<u32>) -> Result<(), SimError> {
        self.last_leaf = leaf;
        self.stats.read_paths += 1;
        let mut path = self.load_path(leaf)?;
        let mut found = target.is_some_and(|a| self.stash.contains_key(&a));
        if let (Some(a), false) = (target, found) {
            for id in self.layout.path(leaf as u64).into_iter().take(self.cfg.cached_levels) {
                if let Some(i) = self.cached[id as usize].iter().position(|r| r.addr == a) {
                    let r = self.cached[id as usize].swap_remove(i);
                    self.stash.insert(a, StashEntry { leaf: r.leaf, data: r.data });
                    found = true;
                    break;
                }
            }
        }
        for pb in path.iter_mut() {
            let r = self.rng.next_u64();
            let hit = if found { None } else { target.and_then(|a| pb.find(a)) };
            let slot = match hit {
                Some((_, s)) => s,
                None => Self::pick_dummy(pb, r),
            };
            let data = self.read_slot(pb, slot)?;
            if let (Some((i, _)), Some(a)) = (hit, target) {
                self.stash.insert(a, StashEntry { leaf: pb.meta.path_labels[i], data });
                found = true;
            }
            pb.vr.consume(slot);
            if pb.vr.read_ctr() >= S && !pb.reshuffle {
                pb.reshuffle = true;
                self.stats.early_reshuffles += 1;
            }
        }
        self.clock.flush();
        for pb in path.iter_mut().filter(|p| p.reshuffle) {
            let reals = self.read_valid(pb)?;
            pb.rebuild = Some(reals);
        }
        self.clock.flush();
        self.write_back(&mut path)?;
        self.clock.flush();
        Ok(())
    }

    /// Deepest level on the path to `leaf` that `other` may occupy.
    fn deepest_common(&self, leaf: u32, other: u32) -> usize {
        let x = leaf ^ other;
        if x == 0 {
            self.cfg.tree_levels - 1
        } else {
            self.cfg.tree_levels - 2 - (31 - x.leading_zeros() as usize)
        }
    }

    pub fn evict(&mut self) -> Result<(), SimError> {
        let leaf = bit_reverse(self.evict_ctr % (1u64 << self.leaf_bits()), self.leaf_bits()) as u32;
        self.evict_ctr += 1;
        self.stats.evictions += 1;
        let mut path = self.load_path(leaf)?;
        for pb in path.iter_mut() {
            for r in self.read_valid(pb)? {
                self.stash.insert(r.addr, StashEntry { leaf: r.leaf, data: r.data });
            }
        }
        self.clock.flush();
        let ids = self.layout.path(leaf as u64);
        for &id in &ids[..self.cfg.cached_levels] {
            for r in std::mem::take(&mut self.cached[id as usize]) {
                self.stash.insert(r.addr, StashEntry { leaf: r.leaf, data: r.data });
            }
        }
        // greedy placement, deepest bucket first
        let levels = self.cfg.tree_levels;
        let mut by_level: Vec<Vec<u32>> = vec![Vec::new(); levels];
        for (&a, e) in &self.stash {
            by_level[self.deepest_common(leaf, e.leaf)].push(a);
        }
        let mut placed: Vec<Vec<Resident>> = vec![Vec::new(); levels];
        let mut carry: Vec<u32> = Vec::new();
        for lv in (0..levels).rev() {
            // deeper leftovers first, then this level's own; addresses ascend within each
            let mut own = std::mem::take(&mut by_level[lv]);
            own.sort_unstable();
            carry.extend(own);
            let take = carry.len().min(Z);
            for a in carry.drain(..take) {
                let e = self.stash.remove(&a).expect("stash entry");
                placed[lv].push(Resident { addr: a, leaf: e.leaf, data: e.data });
            }
        }
        for (lv, &id) in ids.iter().enumerate().take(self.cfg.cached_levels) {
            self.cached[id as usize] = std::mem::take(&mut placed[lv]);
        }
        for pb in path.iter_mut() {
            pb.rebuild = Some(std::mem::take(&mut placed[pb.level]));
        }
        self.write_back(&mut path)?;
        self.clock.flush();
        Ok(())
    }

    /// Writes back the path: rebuilds buckets marked for it, reseals the
    /// metadata above them so the MAC chain stays intact, then the MUST.
    fn write_back(&mut self, path: &mut [PathBucket]) -> Result<(), SimError> {
        let must = self.cfg.scheme.must();
        let deepest = if must { path.iter().rposition(|p| p.rebuild.is_some()) } else { path.len().checked_sub(1) };
        if let Some(d) = deepest {
            let mut below: Option<Mac54> = None;
            for i in (0..=d).rev() {
                if let Some(m) = below {
                    let side = child_side(path[i + 1].id);
                    path[i].meta.child_macs[side] = m;
                }
                let pb = &mut path[i];
                if !must {
                    let vr = if pb.rebuild.is_some() { VrSet::FRESH } else { pb.vr };
                    pb.meta.set_inline_vr(vr);
                }
                match pb.rebuild.take() {
                    Some(reals) => self.rebuild_bucket(pb, reals)?,
                    None => self.reseal(pb)?,
                }
                if self.cfg.scheme.integrity() {
                    below = Some(meta_mac(&self.keys, path[i].id, &path[i].stored));
                }
            }
            if let Some(m) = below {
                let a = self.anchor_index(path[0].id).expect("top DRAM level");
                self.anchors[a] = m;
            }
        }
        if must {
            for pb in path.iter() {
                if let Some(loc) = pb.vr_loc {
                    self.vr_set(&loc, pb.vr);
                }
            }
            self.must_store()?;
        }
        Ok(())
    }

    /// Rewrites a metadata block whose slots are unchanged.
    fn reseal(&mut self, pb: &mut PathBucket) -> Result<(), SimError> {
        let mut host = seal_metadata(&self.keys, pb.id, &pb.meta);
        if self.ecp() {
            self.rewrite_ecps(&mut host, &pb.meta, &pb.pointers);
            pb.pointers = self.pointers_of(&host);
        }
        if self.cfg.scheme.integrity() {
            self.clock.background_mac();
        }
        self.write_block(pb.base, &host, Traffic::Meta)?;
        pb.stored = host;
        Ok(())
    }

    /// Moves a worn-out bucket to a spare location.
    fn relocate(&mut self, pb: &mut PathBucket) -> Result<(), SimError> {
        let spare = self.remap.remap(pb.id).map_err(|e| SimError::Reliability(e.to_string()))?;
        self.stats.bucket_remaps += 1;
        pb.base = self.layout.spare_base(spare);
        pb.ch = BucketChannels::at(&self.geometry, pb.base);
        Ok(())
    }

    /// Permutes, replicates, encrypts and writes a whole bucket with a fresh
    /// counter.
    fn rebuild_bucket(&mut self, pb: &mut PathBucket, reals: Vec<Resident>) -> Result<(), SimError> {
        debug_assert!(reals.len() <= Z);
        let ctr = pb.meta.enc_ctr.next();
        let mut faults: Vec<usize> = pb.pointers.iter().map(|p| p.addr).collect();
        faults.extend(self.pending.remove(&pb.id).unwrap_or_default());
        faults.sort_unstable();
        faults.dedup();
        let assignment = if self.ecp() {
            let stuck = self.rotation_stuck.get(&pb.id).cloned().unwrap_or_default();
            match BUCKET_ECP.solve_stuck(&faults, pb.meta.roffset, &stuck) {
                Ok(a) => Some(a),
                Err(_) => {
                    self.relocate(pb)?;
                    self.rotation_stuck.remove(&pb.id);
                    faults.clear();
                    Some(BUCKET_ECP.solve(&[], 0).expect("no faults"))
                }
            }
        } else {
            None
        };
        // a slot with stuck cells where the replica's pointers or counter
        // live cannot host the metadata replica
        let blocked = faults.iter().filter(|&&f| f >= BLOCK_BITS).fold(0u16, |m, &f| {
            let bit = f % BLOCK_BITS;
            if !(crate::codec::ECP_REGION_END..crate::block::DATA_BITS).contains(&bit) {
                m | 1 << (f / BLOCK_BITS - 1)
            } else {
                m
            }
        });
        let mut lrng = ChaCha8Rng::seed_from_u64(pb.build_seed);
        let mut perm: Vec<usize> = (0..SLOTS).collect();
        let mut plan = None;
        for attempt in 0.. {
            perm.shuffle(&mut lrng);
            if !self.cfg.scheme.replication() {
                break;
            }
            let placed: Vec<(usize, usize)> = (0..reals.len()).map(|i| (i, perm[i])).collect();
            match plan_replicas(&pb.ch, &placed, blocked) {
                Ok(p) => {
                    plan = Some(p);
                    break;
                }
                Err(e) if attempt >= 15 => return Err(SimError::Reliability(format!("bucket {}: {e}", pb.id))),
                Err(_) => {}
            }
        }
        let mut meta = self.fresh_meta();
        meta.child_macs = pb.meta.child_macs;
        meta.enc_ctr = ctr;
        let mut plain = [[0u64; 8]; SLOTS];
        let mut kinds = [SlotKind::Data; SLOTS];
        for (i, r) in reals.iter().enumerate() {
            meta.addresses[i] = r.addr + 1;
            meta.path_labels[i] = r.leaf;
            meta.real_offsets[i] = perm[i] as u8;
            plain[perm[i]] = r.data;
        }
        if let Some(p) = &plan {
            meta.replica_meta_offset = p.meta_replica as u8;
            for &(i, s) in &p.reals {
                plain[s] = reals[i].data;
            }
            kinds[p.meta_replica] = SlotKind::MetaReplica;
            plain[p.meta_replica] = meta_replica_payload(&meta);
        }
        let mut slots: Vec<PhysicalBlock> =
            (0..SLOTS).map(|s| self.seal_slot_block(pb.id, s, ctr, &plain[s], kinds[s], self.partial_for(&pb.ch, s, ctr))).collect();
        let mut host = seal_metadata(&self.keys, pb.id, &meta);
        if let Some(a) = &assignment {
            BUCKET_ECP.write(&mut host, 0, a, |addr| slots[addr / BLOCK_BITS - 1].bit(addr % BLOCK_BITS));
            let clear = BucketMetadata::decode(&host);
            meta.fbit = clear.fbit;
            meta.roffset = clear.roffset;
            meta.ecps = clear.ecps;
            if let Some(p) = &plan {
                let s = p.meta_replica;
                slots[s] = self.seal_slot_block(pb.id, s, ctr, &meta_replica_payload(&meta), SlotKind::MetaReplica, self.partial_for(&pb.ch, s, ctr));
            }
        }
        for (s, b) in slots.iter().enumerate() {
            self.write_block(pb.base + 1 + s as u64, b, Traffic::Data)?;
        }
        self.write_block(pb.base, &host, Traffic::Meta)?;
        if self.cfg.scheme.integrity() {
            for _ in 0..=SLOTS {
                self.clock.background_mac();
            }
        }
        pb.pointers = self.pointers_of(&host);
        pb.meta = meta;
        pb.stored = host;
        pb.vr = VrSet::FRESH;
        Ok(())
    }

    // ---- fault injection ----

    fn inject_transients(&mut self) -> Result<(), SimError> {
        if !self.cfg.scheme.transients() {
            return Ok(());
        }
        while self.clock.now() >= self.next_transient {
            self.next_transient += self.cfg.transient_period;
            let leaf = self.fault_rng.next_u64() & ((1u64 << self.leaf_bits()) - 1);
            let ids = self.layout.path(leaf);
            let dram_levels = ids.len() - self.cfg.cached_levels;
            let id = ids[self.cfg.cached_levels + (self.fault_rng.next_u64() % dram_levels as u64) as usize];
            let index = self.bucket_base(id) + self.fault_rng.next_u64() % crate::codec::BUCKET_BLOCKS as u64;
            let bit = (self.fault_rng.next_u64() % BLOCK_BITS as u64) as u32;
            let at = map_address(index, &self.geometry)?;
            self.dram.inject_fault(FaultRecord::bit(FaultKind::Transient, at, bit, None))?;
            self.stats.injected_transients += 1;
        }
        Ok(())
    }

    // ---- diagnostics ----

    /// Full scan: every mapped block sits, exactly once, in the stash or in
    /// an unread slot of a bucket on its path. Reads DRAM without counting.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (&addr, &leaf) in &self.posmap {
            let mut hits = 0;
            if let Some(e) = self.stash.get(&addr) {
                if e.leaf != leaf {
                    return Err(format!("stash copy of {addr} has leaf {} not {leaf}", e.leaf));
                }
                hits += 1;
            }
            for (lv, id) in self.layout.path(leaf as u64).into_iter().enumerate() {
                if lv < self.cfg.cached_levels {
                    hits += self.cached[id as usize].iter().filter(|r| r.addr == addr).count();
                    continue;
                }
                let mut stored = self.dram.peek(self.bucket_base(id));
                if stored.is_zero() {
                    continue;
                }
                if self.ecp() {
                    BUCKET_ECP.repair_host(&mut stored, 0);
                }
                let meta = open_metadata(&self.keys, id, &stored);
                let vr = self.peek_vr(id, &meta);
                hits += meta.real_slots().filter(|&(i, o)| meta.addresses[i] == addr + 1 && !vr.accessed(o as usize)).count();
            }
            if hits != 1 {
                return Err(format!("block {addr} found {hits} times on its path"));
            }
        }
        for (id, b) in self.cached.iter().enumerate() {
            if b.len() > Z {
                return Err(format!("cached bucket {id} holds {} blocks", b.len()));
            }
        }
        Ok(())
    }

    fn peek_vr(&self, id: u64, meta: &BucketMetadata) -> VrSet {
        let Some(g) = &self.must else { return meta.inline_vr() };
        let loc = g.locate(Layout::level_of(id), Layout::index_in_level(id));
        if loc.node < g.first_dram_node() {
            return self.must_cached[loc.node as usize].vr()[loc.position];
        }
        let b = self.dram.peek(self.must_location(loc.node));
        let mut b = b;
        if self.ecp() && !b.is_zero() {
            crate::ecp::EcpLayout::repair_host(&super::must_io::must_ecp_layout(g.is_leaf_node(loc.node)), &mut b, 0);
        }
        MustNode::decode(&b, g.is_leaf_node(loc.node), g.must_levels).vr()[loc.position]
    }
}
