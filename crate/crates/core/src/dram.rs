//! Bit-level multi-channel ECC DRAM model.
//!
//! Storage is sparse: a block that was never written reads as zero. Timing is
//! not modelled here; callers count operations and charge latency themselves.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use thiserror::Error;

use crate::block::{PhysicalBlock, BLOCK_BITS, WORDS};

#[derive(Debug, Error, PartialEq)]
pub enum DramError {
    #[error("block index {index} outside DRAM capacity {capacity}")]
    Capacity { index: u64, capacity: u64 },
    #[error("coordinates {0} outside geometry")]
    Coords(Coords),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("fault rate {0} not in [0, 1]")]
    Rate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct DramGeometry {
    pub channels: u32,
    pub dimms_per_channel: u32,
    pub ranks_per_dimm: u32,
    pub banks: u32,
    pub rows: u32,
    /// Block-granularity columns per row.
    pub columns: u32,
}

impl Default for DramGeometry {
    /// Two 72-bit DDR3-1600 channels, one dual-rank DIMM each, 8 banks of
    /// 16K rows; a 2K-column x4 device row holds 256 64-byte bursts.
    fn default() -> Self {
        DramGeometry { channels: 2, dimms_per_channel: 1, ranks_per_dimm: 2, banks: 8, rows: 16384, columns: 256 }
    }
}

impl DramGeometry {
    pub fn ranks(&self) -> u32 {
        self.dimms_per_channel * self.ranks_per_dimm
    }

    pub fn capacity(&self) -> u64 {
        self.channels as u64 * self.ranks() as u64 * self.banks as u64 * self.rows as u64 * self.columns as u64
    }

    pub fn validate(&self) -> Result<(), DramError> {
        let dims = [self.channels, self.dimms_per_channel, self.ranks_per_dimm, self.banks, self.rows, self.columns];
        if dims.contains(&0) {
            return Err(DramError::Geometry(format!("all counts must be >= 1: {:?}", self)));
        }
        Ok(())
    }

    /// Keeps every dimension except `rows`, which grows until `blocks` fit.
    pub fn fitted(mut self, blocks: u64) -> Self {
        let per_row = self.capacity() / self.rows as u64;
        self.rows = blocks.div_ceil(per_row).max(1) as u32;
        self
    }

    #[inline]
    pub fn channel_of(&self, index: u64) -> u32 {
        (index % self.channels as u64) as u32
    }
}

/// Physical coordinates of one block. `rank` counts ranks across the DIMMs of
/// a channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Coords {
    pub channel: u32,
    pub rank: u32,
    pub bank: u32,
    pub row: u32,
    pub column: u32,
}

impl fmt::Display for Coords {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ch{} rk{} bk{} row{} col{}", self.channel, self.rank, self.bank, self.row, self.column)
    }
}

impl Coords {
    fn within(&self, g: &DramGeometry) -> bool {
        self.channel < g.channels && self.rank < g.ranks() && self.bank < g.banks && self.row < g.rows && self.column < g.columns
    }
}

/// Decomposes a linear block number as `row:bank:column:rank:channel`, most
/// significant first; the byte offset inside the 72-byte block sits below
/// the channel, so channel is the fastest-varying block dimension.
pub fn map_address(index: u64, g: &DramGeometry) -> Result<Coords, DramError> {
    let capacity = g.capacity();
    if index >= capacity {
        return Err(DramError::Capacity { index, capacity });
    }
    let mut x = index;
    let channel = (x % g.channels as u64) as u32;
    x /= g.channels as u64;
    let rank = (x % g.ranks() as u64) as u32;
    x /= g.ranks() as u64;
    let column = (x % g.columns as u64) as u32;
    x /= g.columns as u64;
    let bank = (x % g.banks as u64) as u32;
    x /= g.banks as u64;
    Ok(Coords { channel, rank, bank, row: x as u32, column })
}

pub fn unmap_address(c: &Coords, g: &DramGeometry) -> Result<u64, DramError> {
    if !c.within(g) {
        return Err(DramError::Coords(*c));
    }
    let mut x = c.row as u64;
    x = x * g.banks as u64 + c.bank as u64;
    x = x * g.columns as u64 + c.column as u64;
    x = x * g.ranks() as u64 + c.rank as u64;
    x = x * g.channels as u64 + c.channel as u64;
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultKind {
    Transient,
    Permanent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    Bit,
    /// One 64-bit word of a block (word 8 is the ECC-chip word).
    Word,
    Column,
    Row,
    Bank,
    Channel,
}

impl FromStr for FaultKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "transient" => Ok(FaultKind::Transient),
            "permanent" => Ok(FaultKind::Permanent),
            _ => Err(format!("unknown fault kind `{s}`")),
        }
    }
}

impl FromStr for Granularity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "bit" => Granularity::Bit,
            "word" => Granularity::Word,
            "column" => Granularity::Column,
            "row" => Granularity::Row,
            "bank" => Granularity::Bank,
            "channel" => Granularity::Channel,
            _ => return Err(format!("unknown granularity `{s}`")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultRecord {
    pub kind: FaultKind,
    pub granularity: Granularity,
    /// Coordinates; fields that a granularity does not use are ignored.
    pub location: Coords,
    /// Bit index (granularity `Bit`, 0..576) or word index (`Word`, 0..9).
    pub offset: u32,
    pub stuck_value: Option<bool>,
}

impl FaultRecord {
    pub fn bit(kind: FaultKind, location: Coords, bit: u32, stuck_value: Option<bool>) -> Self {
        FaultRecord { kind, granularity: Granularity::Bit, location, offset: bit, stuck_value }
    }

    fn matches(&self, c: &Coords) -> bool {
        let l = &self.location;
        match self.granularity {
            Granularity::Bit | Granularity::Word => l == c,
            Granularity::Column => l.channel == c.channel && l.rank == c.rank && l.bank == c.bank && l.column == c.column,
            Granularity::Row => l.channel == c.channel && l.rank == c.rank && l.bank == c.bank && l.row == c.row,
            Granularity::Bank => l.channel == c.channel && l.rank == c.rank && l.bank == c.bank,
            Granularity::Channel => l.channel == c.channel,
        }
    }
}

/// A fault-injection record scheduled at a latency-proxy tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduledFault {
    pub tick: u64,
    pub record: FaultRecord,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("fault schedule line {line}: {msg}")]
pub struct ScheduleError {
    pub line: usize,
    pub msg: String,
}

/// Parses `<tick> <transient|permanent> <granularity> <coords...> [stuck]`.
///
/// Coordinates per granularity: `bit` and `word` take
/// `channel rank bank row column index`; `column` takes
/// `channel rank bank column`; `row` takes `channel rank bank row`; `bank`
/// takes `channel rank bank`; `channel` takes `channel`. Blank lines and
/// `#` comments are skipped.
pub fn parse_fault_schedule(text: &str) -> Result<Vec<ScheduledFault>, ScheduleError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| ScheduleError { line: n + 1, msg };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 4 {
            return Err(err("expected `<tick> <kind> <granularity> <coords...>`".into()));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| err(format!("bad number `{s}`")));
        let tick = num(toks[0])?;
        let kind: FaultKind = toks[1].parse().map_err(err)?;
        let granularity: Granularity = toks[2].parse().map_err(err)?;
        let arity = match granularity {
            Granularity::Bit | Granularity::Word => 6,
            Granularity::Column | Granularity::Row => 4,
            Granularity::Bank => 3,
            Granularity::Channel => 1,
        };
        let rest = &toks[3..];
        if rest.len() != arity && rest.len() != arity + 1 {
            return Err(err(format!("{:?} needs {arity} coordinates", granularity)));
        }
        let v: Vec<u64> = rest.iter().map(|s| num(s)).collect::<Result<_, _>>()?;
        let mut loc = Coords { channel: v[0] as u32, ..Coords::default() };
        let mut offset = 0;
        match granularity {
            Granularity::Bit | Granularity::Word => {
                loc = Coords { channel: v[0] as u32, rank: v[1] as u32, bank: v[2] as u32, row: v[3] as u32, column: v[4] as u32 };
                offset = v[5] as u32;
            }
            Granularity::Column => {
                loc = Coords { channel: v[0] as u32, rank: v[1] as u32, bank: v[2] as u32, row: 0, column: v[3] as u32 };
            }
            Granularity::Row => {
                loc = Coords { channel: v[0] as u32, rank: v[1] as u32, bank: v[2] as u32, row: v[3] as u32, column: 0 };
            }
            Granularity::Bank => {
                loc = Coords { channel: v[0] as u32, rank: v[1] as u32, bank: v[2] as u32, row: 0, column: 0 };
            }
            Granularity::Channel => {}
        }
        let stuck_value = match rest.get(arity) {
            None => None,
            Some(&"0") => Some(false),
            Some(&"1") => Some(true),
            Some(s) => return Err(err(format!("stuck value must be 0 or 1, got `{s}`"))),
        };
        out.push(ScheduledFault { tick, record: FaultRecord { kind, granularity, location: loc, offset, stuck_value } });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy)]
pub struct ReadResult {
    pub block: PhysicalBlock,
    /// The block's channel has failed; the content is garbage.
    pub channel_failed: bool,
}

#[derive(Debug, Clone, Copy, Default)]
struct Stuck {
    mask: PhysicalBlock,
    value: PhysicalBlock,
}

#[derive(Debug, Clone)]
struct RegionFault {
    id: u64,
    record: FaultRecord,
    consumed: HashSet<u64>,
}

#[derive(Debug, Clone)]
pub struct Dram {
    geometry: DramGeometry,
    seed: u64,
    cells: HashMap<u64, PhysicalBlock>,
    stuck: HashMap<u64, Stuck>,
    pending: HashMap<u64, PhysicalBlock>,
    regions: Vec<RegionFault>,
    next_region_id: u64,
    failed: Vec<bool>,
    scheduled_failure: Option<(u64, u32)>,
    garbage_ctr: u64,
    reads: u64,
    writes: u64,
    trace: Option<Vec<(AccessKind, u64)>>,
    attacked: HashSet<u64>,
    attacked_reads: Vec<u64>,
}

impl Dram {
    pub fn new(geometry: DramGeometry, seed: u64) -> Result<Self, DramError> {
        geometry.validate()?;
        Ok(Dram {
            geometry,
            seed,
            cells: HashMap::new(),
            stuck: HashMap::new(),
            pending: HashMap::new(),
            regions: Vec::new(),
            next_region_id: 0,
            failed: vec![false; geometry.channels as usize],
            scheduled_failure: None,
            garbage_ctr: 0,
            reads: 0,
            writes: 0,
            trace: None,
            attacked: HashSet::new(),
            attacked_reads: Vec::new(),
        })
    }

    pub fn geometry(&self) -> &DramGeometry {
        &self.geometry
    }

    pub fn reads(&self) -> u64 {
        self.reads
    }

    pub fn writes(&self) -> u64 {
        self.writes
    }

    pub fn ops(&self) -> u64 {
        self.reads + self.writes
    }

    fn check(&self, index: u64) -> Result<(), DramError> {
        if index >= self.geometry.capacity() {
            return Err(DramError::Capacity { index, capacity: self.geometry.capacity() });
        }
        Ok(())
    }

    fn tick_op(&mut self) {
        if let Some((at, ch)) = self.scheduled_failure {
            if self.reads + self.writes >= at {
                self.scheduled_failure = None;
                self.fail_channel(ch);
            }
        }
    }

    fn garbage(&mut self, index: u64, salt: u64) -> PhysicalBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ index.rotate_left(17) ^ salt.rotate_left(41));
        let mut b = PhysicalBlock::ZERO;
        for w in b.words.iter_mut() {
            *w = rng.random();
        }
        b
    }

    pub fn read(&mut self, index: u64) -> Result<ReadResult, DramError> {
        self.check(index)?;
        self.tick_op();
        self.reads += 1;
        if let Some(t) = self.trace.as_mut() {
            t.push((AccessKind::Read, index));
        }
        if self.attacked.contains(&index) {
            self.attacked_reads.push(index);
        }
        let ch = self.geometry.channel_of(index);
        if self.failed[ch as usize] {
            self.garbage_ctr += 1;
            let salt = self.garbage_ctr;
            return Ok(ReadResult { block: self.garbage(index, salt), channel_failed: true });
        }
        let mut block = self.cells.get(&index).copied().unwrap_or_default();
        if let Some(s) = self.stuck.get(&index) {
            block = apply_stuck(&block, s);
        }
        if let Some(x) = self.pending.remove(&index) {
            block = block.xor(&x);
        }
        if !self.regions.is_empty() {
            block = self.apply_regions(index, block);
        }
        Ok(ReadResult { block, channel_failed: false })
    }

    fn apply_regions(&mut self, index: u64, mut block: PhysicalBlock) -> PhysicalBlock {
        let coords = match map_address(index, &self.geometry) {
            Ok(c) => c,
            Err(_) => return block,
        };
        let mut hits = Vec::new();
        for (i, r) in self.regions.iter().enumerate() {
            if r.record.matches(&coords) {
                hits.push(i);
            }
        }
        for i in hits {
            let id = self.regions[i].id;
            match self.regions[i].record.kind {
                FaultKind::Permanent => {
                    // the whole block is stuck at a fixed pseudo-random pattern
                    block = self.garbage(index, id.wrapping_mul(0x9e37_79b9));
                }
                FaultKind::Transient => {
                    if self.regions[i].consumed.insert(index) {
                        let noise = self.garbage(index, id.wrapping_mul(0x85eb_ca6b) ^ 1);
                        block = block.xor(&noise);
                    }
                }
            }
        }
        block
    }

    pub fn write(&mut self, index: u64, block: &PhysicalBlock) -> Result<(), DramError> {
        self.check(index)?;
        self.tick_op();
        self.writes += 1;
        if let Some(t) = self.trace.as_mut() {
            t.push((AccessKind::Write, index));
        }
        self.attacked.remove(&index);
        // a pending upset is overwritten along with the cell
        self.pending.remove(&index);
        let ch = self.geometry.channel_of(index);
        if self.failed[ch as usize] {
            return Ok(());
        }
        let stored = match self.stuck.get(&index) {
            Some(s) => apply_stuck(block, s),
            None => *block,
        };
        if stored.is_zero() {
            self.cells.remove(&index);
        } else {
            self.cells.insert(index, stored);
        }
        Ok(())
    }

    pub fn read_at(&mut self, c: &Coords) -> Result<ReadResult, DramError> {
        let i = unmap_address(c, &self.geometry)?;
        self.read(i)
    }

    pub fn write_at(&mut self, c: &Coords, block: &PhysicalBlock) -> Result<(), DramError> {
        let i = unmap_address(c, &self.geometry)?;
        self.write(i, block)
    }

    pub fn inject_fault(&mut self, record: FaultRecord) -> Result<(), DramError> {
        let loc = record.location;
        let g = self.geometry;
        let in_range = match record.granularity {
            Granularity::Bit => loc.within(&g) && (record.offset as usize) < BLOCK_BITS,
            Granularity::Word => loc.within(&g) && (record.offset as usize) < WORDS,
            Granularity::Column => loc.channel < g.channels && loc.rank < g.ranks() && loc.bank < g.banks && loc.column < g.columns,
            Granularity::Row => loc.channel < g.channels && loc.rank < g.ranks() && loc.bank < g.banks && loc.row < g.rows,
            Granularity::Bank => loc.channel < g.channels && loc.rank < g.ranks() && loc.bank < g.banks,
            Granularity::Channel => loc.channel < g.channels,
        };
        if !in_range {
            return Err(DramError::Coords(loc));
        }
        match record.granularity {
            Granularity::Bit | Granularity::Word => {
                let index = unmap_address(&loc, &g)?;
                let mut m = PhysicalBlock::ZERO;
                if record.granularity == Granularity::Bit {
                    m.set_bit(record.offset as usize, true);
                } else {
                    m.words[record.offset as usize] = u64::MAX;
                }
                match record.kind {
                    FaultKind::Transient => {
                        let e = self.pending.entry(index).or_default();
                        *e = e.xor(&m);
                    }
                    FaultKind::Permanent => {
                        let v = if record.stuck_value.unwrap_or(true) { m } else { PhysicalBlock::ZERO };
                        self.add_stuck(index, &m, &v);
                    }
                }
            }
            Granularity::Channel => self.fail_channel(loc.channel),
            _ => {
                let id = self.next_region_id;
                self.next_region_id += 1;
                self.regions.push(RegionFault { id, record, consumed: HashSet::new() });
            }
        }
        Ok(())
    }

    /// Marks cells stuck; `value` gives the stuck level for each cell in `mask`.
    pub fn add_stuck(&mut self, index: u64, mask: &PhysicalBlock, value: &PhysicalBlock) {
        let e = self.stuck.entry(index).or_default();
        for w in 0..WORDS {
            e.mask.words[w] |= mask.words[w];
            e.value.words[w] = (e.value.words[w] & !mask.words[w]) | (value.words[w] & mask.words[w]);
        }
        if let Some(c) = self.cells.get_mut(&index) {
            *c = apply_stuck(c, e);
        }
    }

    pub fn fail_channel(&mut self, ch: u32) {
        if let Some(f) = self.failed.get_mut(ch as usize) {
            *f = true;
        }
    }

    /// Fails `ch` once the total operation count reaches `after_ops`.
    pub fn schedule_channel_failure(&mut self, after_ops: u64, ch: u32) {
        self.scheduled_failure = Some((after_ops, ch));
    }

    pub fn failed_channels(&self) -> Vec<u32> {
        self.failed.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i as u32).collect()
    }

    /// Swaps in a blank replacement DIMM for `ch`: clears its failure flag,
    /// its stored content and every fault confined to it.
    pub fn replace_channel(&mut self, ch: u32) {
        let g = self.geometry;
        self.failed[ch as usize] = false;
        self.cells.retain(|&i, _| g.channel_of(i) != ch);
        self.stuck.retain(|&i, _| g.channel_of(i) != ch);
        self.pending.retain(|&i, _| g.channel_of(i) != ch);
        self.regions.retain(|r| r.record.location.channel != ch);
    }

    /// Samples independent stuck-at faults with per-bit probability `rate`
    /// over blocks `[start, end)`. Returns the number of faulty bits.
    pub fn sample_permanent_faults(&mut self, rate: f64, seed: u64, start: u64, end: u64) -> Result<u64, DramError> {
        if !(0.0..=1.0).contains(&rate) || rate.is_nan() {
            return Err(DramError::Rate(rate));
        }
        if end > start {
            self.check(end - 1)?;
        }
        if rate == 0.0 || end <= start {
            return Ok(0);
        }
        let total = (end - start) * BLOCK_BITS as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gap = Geometric::new(rate).map_err(|_| DramError::Rate(rate))?;
        let mut pos = gap.sample(&mut rng);
        let mut count = 0;
        while pos < total {
            let index = start + pos / BLOCK_BITS as u64;
            let bit = (pos % BLOCK_BITS as u64) as usize;
            let mut m = PhysicalBlock::ZERO;
            m.set_bit(bit, true);
            let v = if rng.random::<bool>() { m } else { PhysicalBlock::ZERO };
            self.add_stuck(index, &m, &v);
            count += 1;
            pos += 1 + gap.sample(&mut rng);
        }
        Ok(count)
    }

    pub fn permanent_fault_count(&self) -> u64 {
        self.stuck.values().map(|s| s.mask.count_ones() as u64).sum()
    }

    /// Stuck-cell mask of one block (diagnostics and tests).
    pub fn stuck_mask(&self, index: u64) -> PhysicalBlock {
        self.stuck.get(&index).map(|s| s.mask).unwrap_or_default()
    }

    pub fn start_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<(AccessKind, u64)> {
        self.trace.take().unwrap_or_default()
    }

    /// Raw stored bits, bypassing faults, counters and traces.
    pub fn peek(&self, index: u64) -> PhysicalBlock {
        self.cells.get(&index).copied().unwrap_or_default()
    }

    /// Adversarial overwrite of stored bits, bypassing counters. A block whose
    /// content actually changes is tracked until the protocol overwrites it.
    pub fn poke(&mut self, index: u64, block: &PhysicalBlock) {
        if self.peek(index) != *block {
            self.attacked.insert(index);
        }
        if block.is_zero() {
            self.cells.remove(&index);
        } else {
            self.cells.insert(index, *block);
        }
    }

    /// Indices of adversarially modified blocks that were read before being
    /// overwritten, in read order. Draining.
    pub fn take_attacked_reads(&mut self) -> Vec<u64> {
        std::mem::take(&mut self.attacked_reads)
    }

    pub fn attacked_blocks(&self) -> &HashSet<u64> {
        &self.attacked
    }

    /// Indices of every stored (non-zero) block.
    pub fn stored_indices(&self) -> impl Iterator<Item = u64> + '_ {
        self.cells.keys().copied()
    }
}

fn apply_stuck(b: &PhysicalBlock, s: &Stuck) -> PhysicalBlock {
    let mut out = *b;
    for w in 0..WORDS {
        out.words[w] = (out.words[w] & !s.mask.words[w]) | (s.value.words[w] & s.mask.words[w]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn toy() -> DramGeometry {
        DramGeometry { channels: 2, dimms_per_channel: 1, ranks_per_dimm: 2, banks: 2, rows: 4, columns: 2 }
    }

    #[test]
    fn consecutive_blocks_alternate_channels() {
        let g = DramGeometry::default();
        assert_eq!(map_address(0, &g).unwrap().channel, 0);
        assert_eq!(map_address(1, &g).unwrap().channel, 1);
        assert_eq!(map_address(0, &g).unwrap(), Coords::default());
    }

    #[test]
    fn toy_mapping_is_a_balanced_permutation() {
        let g = toy();
        assert_eq!(g.capacity(), 64);
        let mut seen = HashSet::new();
        let mut per_channel = [0; 2];
        for i in 0..64 {
            let c = map_address(i, &g).unwrap();
            assert!(seen.insert(c));
            per_channel[c.channel as usize] += 1;
            assert_eq!(unmap_address(&c, &g).unwrap(), i);
        }
        assert_eq!(per_channel, [32, 32]);
        assert_eq!(map_address(64, &g), Err(DramError::Capacity { index: 64, capacity: 64 }));
    }

    #[test]
    fn bucket_slots_split_evenly_over_channels() {
        let g = DramGeometry::default();
        for bucket in 0..50u64 {
            let base = bucket * 13;
            let ch0 = (1..13).filter(|s| g.channel_of(base + s) == 0).count();
            assert_eq!(ch0, 6);
        }
    }

    #[test]
    fn stuck_cell_overrides_writes() {
        let mut d = Dram::new(toy(), 1).unwrap();
        let c = map_address(5, &toy()).unwrap();
        d.inject_fault(FaultRecord::bit(FaultKind::Permanent, c, 7, Some(true))).unwrap();
        d.write(5, &PhysicalBlock::ZERO).unwrap();
        for _ in 0..3 {
            assert!(d.read(5).unwrap().block.bit(7));
        }
    }

    #[test]
    fn transient_is_one_shot() {
        let mut d = Dram::new(toy(), 1).unwrap();
        let mut b = PhysicalBlock::ZERO;
        b.words[3] = 0xabcd;
        d.write(9, &b).unwrap();
        let c = map_address(9, &toy()).unwrap();
        d.inject_fault(FaultRecord::bit(FaultKind::Transient, c, 100, None)).unwrap();
        assert_ne!(d.read(9).unwrap().block, b);
        assert_eq!(d.read(9).unwrap().block, b);
    }

    #[test]
    fn random_traffic_matches_stuck_mask_shadow() {
        let g = toy();
        let mut d = Dram::new(g, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut masks: HashMap<u64, (PhysicalBlock, PhysicalBlock)> = HashMap::new();
        for _ in 0..10 {
            let i = rng.random_range(0..64);
            let bit = rng.random_range(0..BLOCK_BITS);
            let v = rng.random::<bool>();
            d.inject_fault(FaultRecord::bit(FaultKind::Permanent, map_address(i, &g).unwrap(), bit as u32, Some(v))).unwrap();
            let e = masks.entry(i).or_default();
            e.0.set_bit(bit, true);
            e.1.set_bit(bit, v);
        }
        let mut shadow: HashMap<u64, PhysicalBlock> = HashMap::new();
        for _ in 0..1000 {
            let i = rng.random_range(0..64);
            let mut b = PhysicalBlock::ZERO;
            for w in b.words.iter_mut() {
                *w = rng.next_u64();
            }
            d.write(i, &b).unwrap();
            shadow.insert(i, b);
            let j = rng.random_range(0..64);
            let mut expect = shadow.get(&j).copied().unwrap_or_default();
            if let Some((m, v)) = masks.get(&j) {
                for w in 0..WORDS {
                    expect.words[w] = (expect.words[w] & !m.words[w]) | (v.words[w] & m.words[w]);
                }
            }
            assert_eq!(d.read(j).unwrap().block, expect);
        }
    }

    #[test]
    fn failed_channel_reads_garbage_other_channel_intact() {
        let g = toy();
        let mut d = Dram::new(g, 5).unwrap();
        let mut shadow = Vec::new();
        for i in 0..64u64 {
            let mut b = PhysicalBlock::ZERO;
            b.words[0] = i + 1;
            b.words[8] = !i;
            d.write(i, &b).unwrap();
            shadow.push(b);
        }
        d.fail_channel(0);
        d.fail_channel(0);
        for i in 0..64u64 {
            let r = d.read(i).unwrap();
            if g.channel_of(i) == 0 {
                assert!(r.channel_failed);
                assert_ne!(r.block, shadow[i as usize]);
            } else {
                assert!(!r.channel_failed);
                assert_eq!(r.block, shadow[i as usize]);
            }
        }
        d.replace_channel(0);
        for i in 0..64u64 {
            d.write(i, &shadow[i as usize]).unwrap();
            assert_eq!(d.read(i).unwrap().block, shadow[i as usize]);
        }
    }

    #[test]
    fn zero_rate_samples_nothing() {
        let mut d = Dram::new(toy(), 1).unwrap();
        assert_eq!(d.sample_permanent_faults(0.0, 1, 0, 64).unwrap(), 0);
        assert!(d.sample_permanent_faults(1.5, 1, 0, 64).is_err());
    }

    #[test]
    fn sampled_fault_count_within_three_sigma() {
        // 13_200 blocks x 576 bits = 7_603_200 bits; Binomial(n, 1e-4).
        let g = DramGeometry::default();
        let mut d = Dram::new(g, 1).unwrap();
        let blocks = 13_200u64;
        let n = (blocks * 576) as f64;
        let p = 1e-4;
        let mean = n * p;
        let sd = (n * p * (1.0 - p)).sqrt();
        let count = d.sample_permanent_faults(p, 42, 0, blocks).unwrap() as f64;
        assert!((count - mean).abs() < 3.0 * sd, "count {count} mean {mean}");
        assert_eq!(d.permanent_fault_count() as f64, count);
    }

    #[test]
    fn identical_seeds_give_identical_fault_maps() {
        let g = toy();
        let mut a = Dram::new(g, 9).unwrap();
        let mut b = Dram::new(g, 9).unwrap();
        a.sample_permanent_faults(0.01, 4, 0, 64).unwrap();
        b.sample_permanent_faults(0.01, 4, 0, 64).unwrap();
        for i in 0..64 {
            assert_eq!(a.stuck_mask(i), b.stuck_mask(i));
            assert_eq!(a.read(i).unwrap().block, b.read(i).unwrap().block);
        }
    }

    #[test]
    fn schedule_parses_all_granularities() {
        let text = "# demo\n10 transient bit 0 1 2 3 1 77\n20 permanent word 1 0 0 0 0 8 0\n30 permanent row 0 1 1 3\n40 transient column 1 0 0 1\n50 permanent bank 0 0 1\n60 permanent channel 1\n";
        let s = parse_fault_schedule(text).unwrap();
        assert_eq!(s.len(), 6);
        assert_eq!(s[0].record.offset, 77);
        assert_eq!(s[1].record.stuck_value, Some(false));
        assert_eq!(s[5].record.granularity, Granularity::Channel);
        let e = parse_fault_schedule("5 permanent bit 0 0\n").unwrap_err();
        assert_eq!(e.line, 1);
    }

    #[test]
    fn row_fault_hits_only_its_row() {
        let g = toy();
        let mut d = Dram::new(g, 2).unwrap();
        let loc = Coords { channel: 1, rank: 0, bank: 1, row: 2, column: 0 };
        d.inject_fault(FaultRecord { kind: FaultKind::Permanent, granularity: Granularity::Row, location: loc, offset: 0, stuck_value: None }).unwrap();
        for i in 0..64 {
            let c = map_address(i, &g).unwrap();
            let hit = c.channel == 1 && c.rank == 0 && c.bank == 1 && c.row == 2;
            assert_eq!(!d.read(i).unwrap().block.is_zero(), hit, "{c}");
        }
    }
}
