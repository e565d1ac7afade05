//! Trace-driven harness: traces, synthetic workloads, config files, fault
//! schedules and attack campaigns around one [`Oram`].

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::block::{Payload, BLOCK_BITS};
use crate::dram::{Dram, ScheduledFault};
use crate::oram::{Layout, Oram, OramConfig, SimError};
use crate::stats::StatsReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReqKind {
    Read,
    Write,
}

/// One logical request on a 64-byte block address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Request {
    pub kind: ReqKind,
    pub addr: u64,
}

impl fmt::Display for Request {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            ReqKind::Read => 'R',
            ReqKind::Write => 'W',
        };
        write!(f, "{k} {:#x}", self.addr)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("trace line {line}: {msg}")]
pub struct TraceError {
    pub line: usize,
    pub msg: String,
}

/// Parses `R <hex>` / `W <hex>` lines. Blank lines and `#` comments are
/// skipped; the `0x` prefix is optional.
pub fn parse_trace(text: &str) -> Result<Vec<Request>, TraceError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| TraceError { line: n + 1, msg };
        let mut toks = line.split_whitespace();
        let kind = match toks.next() {
            Some("R" | "r") => ReqKind::Read,
            Some("W" | "w") => ReqKind::Write,
            Some(t) => return Err(err(format!("unknown op `{t}`, expected R or W"))),
            None => unreachable!("line is not empty"),
        };
        let a = toks.next().ok_or_else(|| err("missing address".into()))?;
        if let Some(extra) = toks.next() {
            return Err(err(format!("unexpected `{extra}` after the address")));
        }
        let hex = a.strip_prefix("0x").or_else(|| a.strip_prefix("0X")).unwrap_or(a);
        let addr = u64::from_str_radix(hex, 16).map_err(|_| err(format!("bad hex address `{a}`")))?;
        out.push(Request { kind, addr });
    }
    Ok(out)
}

pub fn format_trace(trace: &[Request]) -> String {
    trace.iter().map(|r| format!("{r}\n")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Workload {
    Uniform,
    /// Zipf with exponent 1 over the footprint.
    Zipfian,
}

impl FromStr for Workload {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(Workload::Uniform),
            "zipfian" | "zipf" => Ok(Workload::Zipfian),
            _ => Err(format!("unknown workload `{s}` (uniform or zipfian)")),
        }
    }
}

/// Reproducible synthetic trace; half the requests are writes.
pub fn generate_trace(kind: Workload, n: usize, footprint: u64, seed: u64) -> Vec<Request> {
    let footprint = footprint.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zipf = Zipf::new(footprint as f64, 1.0).expect("footprint >= 1");
    (0..n)
        .map(|_| {
            let addr = match kind {
                Workload::Uniform => rng.random_range(0..footprint),
                Workload::Zipfian => zipf.sample(&mut rng) as u64 - 1,
            };
            let kind = if rng.random_bool(0.5) { ReqKind::Write } else { ReqKind::Read };
            Request { kind, addr }
        })
        .collect()
}

/// Parses `kind,n,footprint` as given on the command line.
pub fn parse_synthetic(spec: &str) -> Result<(Workload, usize, u64), String> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    let [kind, n, fp] = parts[..] else {
        return Err(format!("expected `kind,n,footprint`, got `{spec}`"));
    };
    let n: usize = n.parse().map_err(|_| format!("bad request count `{n}`"))?;
    let fp: u64 = fp.parse().map_err(|_| format!("bad footprint `{fp}`"))?;
    if n == 0 || fp == 0 {
        return Err("request count and footprint must be positive".into());
    }
    Ok((kind.parse()?, n, fp))
}

/// Reads a flat `key = value` config over the defaults. Keys are the
/// [`OramConfig`] field names; `dram.<field>` sets the DRAM geometry.
pub fn parse_config(text: &str) -> Result<OramConfig, SimError> {
    let mut root = serde_json::to_value(OramConfig::default()).expect("config serializes");
    let mut dram: Option<Map<String, Value>> = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |m: String| SimError::Config(format!("config line {}: {m}", n + 1));
        let (k, v) = line.split_once('=').ok_or_else(|| bad("expected `key = value`".into()))?;
        let (k, v) = (k.trim(), v.trim());
        let value = if let Ok(u) = v.parse::<u64>() {
            Value::from(u)
        } else if let Ok(f) = v.parse::<f64>() {
            Value::from(f)
        } else {
            Value::from(v.trim_matches('"'))
        };
        if let Some(field) = k.strip_prefix("dram.") {
            let m = dram.get_or_insert_with(|| match serde_json::to_value(crate::dram::DramGeometry::default()) {
                Ok(Value::Object(m)) => m,
                _ => unreachable!("geometry is a struct"),
            });
            if !m.contains_key(field) {
                return Err(bad(format!("unknown key `{k}`")));
            }
            m.insert(field.to_string(), value);
        } else {
            let obj = root.as_object_mut().expect("config is a struct");
            if k == "dram" || !obj.contains_key(k) {
                return Err(bad(format!("unknown key `{k}`")));
            }
            obj.insert(k.to_string(), value);
        }
    }
    if let Some(m) = dram {
        root["dram"] = Value::Object(m);
    }
    let cfg: OramConfig = serde_json::from_value(root).map_err(|e| SimError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Content the harness writes for request `i`.
pub fn payload_for(i: u64, addr: u64) -> Payload {
    let mut p = [0u64; 8];
    for (w, x) in p.iter_mut().enumerate() {
        *x = (addr << 20 | i).rotate_left(w as u32 * 8) ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(w as u64 + 1);
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    /// Flip one stored bit.
    TamperBit,
    /// Put back an older version of a block.
    ReplayBlock,
    /// Exchange two blocks.
    SwapBlocks,
}

impl FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tamper_bit" | "tamper" => Ok(AttackKind::TamperBit),
            "replay_block" | "replay" => Ok(AttackKind::ReplayBlock),
            "swap_blocks" | "swap" | "splice" => Ok(AttackKind::SwapBlocks),
            _ => Err(format!("unknown attack `{s}`")),
        }
    }
}

/// An attack fired just before request `when`. Without explicit targets it
/// picks blocks the next request is bound to read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attack {
    pub kind: AttackKind,
    pub when: u64,
    pub targets: Vec<u64>,
}

/// Ops between capturing the old copy and replaying it.
pub const REPLAY_LAG: u64 = 50;

/// Parses `kind@op[:block[:block]]`, comma separated.
pub fn parse_attacks(spec: &str) -> Result<Vec<Attack>, String> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|one| {
            let (kind, rest) = one.split_once('@').ok_or_else(|| format!("attack `{one}` lacks `@op`"))?;
            let mut parts = rest.split(':');
            let when = parts.next().unwrap_or("").parse().map_err(|_| format!("bad op index in `{one}`"))?;
            let targets = parts.map(|t| t.parse().map_err(|_| format!("bad block index `{t}`"))).collect::<Result<Vec<u64>, _>>()?;
            let kind: AttackKind = kind.parse()?;
            if targets.len() > if kind == AttackKind::SwapBlocks { 2 } else { 1 } {
                return Err(format!("too many targets in `{one}`"));
            }
            Ok(Attack { kind, when, targets })
        })
        .collect()
}

/// Result of one run. A run stops at the first error it cannot absorb.
#[derive(Debug)]
pub struct Outcome {
    pub report: StatsReport,
    pub attacks_applied: usize,
    pub error: Option<SimError>,
    /// Worn-out buckets and the spare each moved to.
    pub remapped: Vec<(u64, u32)>,
}

impl Outcome {
    /// 0 clean, 2 integrity violation or detected attack, 3 unrecoverable
    /// reliability failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        if let Some(e) = &self.error {
            return e.exit_code();
        }
        let c = &self.report.counters;
        if c.violations > 0 || (self.attacks_applied > 0 && c.detections > 0) {
            2
        } else {
            0
        }
    }
}

/// Blocks the request on `addr` will certainly read: its path's metadata and,
/// with a MUST, the path's DRAM MUST nodes. Empty when the address has no
/// leaf yet.
pub fn blocks_on_next_path(oram: &Oram, addr: u64) -> Vec<u64> {
    let Some(leaf) = oram.leaf_of(addr as u32) else { return Vec::new() };
    let c = oram.config().cached_levels;
    let mut out: Vec<u64> = oram.layout().path(leaf as u64)[c..].iter().map(|&id| oram.bucket_location(id)).collect();
    let copy = oram.next_must_copy();
    out.extend(oram.must_nodes_on_path(leaf).into_iter().filter_map(|n| oram.must_node_location(n)).map(|b| b + copy));
    out
}

/// Applies one attack to DRAM; `old` is the snapshot replays draw from.
/// Returns whether any stored bit changed.
pub fn apply_attack(oram: &mut Oram, a: &Attack, next: Option<u64>, old: Option<&Dram>, rng: &mut ChaCha8Rng) -> bool {
    let candidates = match (&a.targets[..], next) {
        ([t, ..], _) => vec![*t],
        ([], Some(addr)) => blocks_on_next_path(oram, addr),
        ([], None) => Vec::new(),
    };
    let candidates = if candidates.is_empty() {
        let mut all: Vec<u64> = oram.dram().stored_indices().collect();
        all.sort_unstable();
        all
    } else {
        candidates
    };
    if candidates.is_empty() {
        return false;
    }
    match a.kind {
        AttackKind::TamperBit => {
            let t = candidates[rng.random_range(0..candidates.len())];
            let mut b = oram.dram().peek(t);
            b.flip_bit(rng.random_range(0..BLOCK_BITS));
            oram.dram_mut().poke(t, &b);
            true
        }
        AttackKind::ReplayBlock => {
            let Some(old) = old else { return false };
            let stale: Vec<u64> = candidates.into_iter().filter(|&t| old.peek(t) != oram.dram().peek(t)).collect();
            if stale.is_empty() {
                return false;
            }
            let t = stale[rng.random_range(0..stale.len())];
            oram.dram_mut().poke(t, &old.peek(t));
            true
        }
        AttackKind::SwapBlocks => {
            let t = candidates[rng.random_range(0..candidates.len())];
            let other = match a.targets.get(1) {
                Some(&o) => Some(o),
                None => splice_partner(oram, t, rng),
            };
            let Some(o) = other else { return false };
            let (x, y) = (oram.dram().peek(t), oram.dram().peek(o));
            if x == y {
                return false;
            }
            oram.dram_mut().poke(t, &y);
            oram.dram_mut().poke(o, &x);
            true
        }
    }
}

/// A block of the same kind as `t` elsewhere: the same position in another
/// bucket of the same level, or another MUST node's same copy.
fn splice_partner(oram: &Oram, t: u64, rng: &mut ChaCha8Rng) -> Option<u64> {
    use crate::oram::Region;
    let layout = oram.layout();
    let pick = |rng: &mut ChaCha8Rng, lo: u64, n: u64| lo + rng.random_range(0..n.max(1));
    for _ in 0..32 {
        let o = match layout.locate(t) {
            Region::Bucket { id, pos } => {
                let level = Layout::level_of(id);
                let other = pick(rng, (1 << level) - 1, 1 << level);
                oram.bucket_location(other) + pos as u64
            }
            Region::Must { mirror, .. } | Region::MustSpare { mirror, .. } => {
                let g = oram.must_geometry()?;
                let node = pick(rng, g.first_dram_node(), g.dram_nodes());
                oram.must_node_location(node)? + mirror as u64
            }
            _ => {
                let all: Vec<u64> = oram.dram().stored_indices().collect();
                all[rng.random_range(0..all.len())]
            }
        };
        if o != t && oram.dram().peek(o) != oram.dram().peek(t) {
            return Some(o);
        }
    }
    None
}

/// Runs `trace` against a fresh controller.
pub fn run(cfg: &OramConfig, trace: &[Request], faults: &[ScheduledFault], attacks: &[Attack]) -> Result<Outcome, SimError> {
    let cap = cfg.logical_capacity();
    if let Some(max) = trace.iter().map(|r| r.addr).max() {
        if max >= cap || max >= u32::MAX as u64 {
            return Err(SimError::Config(format!("trace footprint reaches {max:#x}; the tree holds {cap} blocks at {} utilization", cfg.utilization)));
        }
    }
    let mut oram = Oram::new(cfg.clone())?;
    let mut faults: Vec<ScheduledFault> = faults.to_vec();
    faults.sort_by_key(|f| f.tick);
    let mut next_fault = 0;
    let mut attacks: Vec<Attack> = attacks.to_vec();
    attacks.sort_by_key(|a| a.when);
    let mut arng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa77a_c4ed);
    let mut snapshots: Vec<(u64, Dram)> = Vec::new();
    let mut applied = 0;
    let mut next_attack = 0;
    let mut error = None;
    for (i, req) in trace.iter().enumerate() {
        let i = i as u64;
        if attacks.iter().any(|a| a.kind == AttackKind::ReplayBlock && a.when.saturating_sub(REPLAY_LAG) == i) {
            snapshots.push((i, oram.dram().clone()));
        }
        while next_attack < attacks.len() && attacks[next_attack].when <= i {
            let a = &attacks[next_attack];
            let old = snapshots.iter().find(|(at, _)| *at == a.when.saturating_sub(REPLAY_LAG)).map(|(_, d)| d);
            if apply_attack(&mut oram, a, Some(req.addr), old, &mut arng) {
                applied += 1;
            }
            next_attack += 1;
        }
        while next_fault < faults.len() && faults[next_fault].tick <= oram.clock().now() {
            let rec = faults[next_fault].record;
            next_fault += 1;
            if let Err(e) = oram.dram_mut().inject_fault(rec) {
                error = Some(e.into());
                break;
            }
        }
        if error.is_some() {
            break;
        }
        let r = match req.kind {
            ReqKind::Read => oram.read(req.addr as u32),
            ReqKind::Write => oram.write(req.addr as u32, payload_for(i, req.addr)),
        };
        if let Err(e) = r {
            error = Some(e);
            break;
        }
    }
    if error.is_none() && cfg.scheme.replication() {
        if let Err(e) = oram.sync_failures() {
            error = Some(e);
        }
    }
    let mut remapped: Vec<(u64, u32)> = oram.remap().entries().collect();
    remapped.sort_unstable();
    Ok(Outcome { report: oram.report(), attacks_applied: applied, error, remapped })
}

/// Runs until the oram has served `n` uniform requests; a convenience for
/// campaigns that want a warmed-up tree.
pub fn warm_up(oram: &mut Oram, n: usize, footprint: u64, seed: u64) -> Result<(), SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n as u64 {
        let addr = rng.next_u64() % footprint;
        oram.write(addr as u32, payload_for(i, addr))?;
    }
    Ok(())
}

/// Stored content of every block of `a` and `b` agrees.
pub fn same_content(a: &Dram, b: &Dram) -> Result<(), u64> {
    let mut idx: Vec<u64> = a.stored_indices().chain(b.stored_indices()).collect();
    idx.sort_unstable();
    idx.dedup();
    match idx.into_iter().find(|&i| a.peek(i) != b.peek(i)) {
        Some(i) => Err(i),
        None => Ok(()),
    }
}
