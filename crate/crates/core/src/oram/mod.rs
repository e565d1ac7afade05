//! Ring ORAM controller with optional integrity tree, MUST-held valid bits,
//! cross-channel replication and ECP repair.

mod controller;
mod layout;
mod must_io;
mod recovery;
mod timing;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dram::{DramError, DramGeometry};
use crate::must::MustError;

pub use controller::{Op, Oram};
pub use layout::{Layout, Region};
pub use timing::Clock;

/// Dummy slots per bucket; a bucket is reshuffled after this many reads.
pub const S: u8 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Baseline,
    Ri,
    Rim,
    Rimr,
    Rimre,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [Scheme::Baseline, Scheme::Ri, Scheme::Rim, Scheme::Rimr, Scheme::Rimre];

    /// Metadata and data MACs.
    pub fn integrity(self) -> bool {
        self != Scheme::Baseline
    }

    /// Valid bits live in the MUST instead of the metadata block.
    pub fn must(self) -> bool {
        matches!(self, Scheme::Rim | Scheme::Rimr | Scheme::Rimre)
    }

    /// Replicas, partial counters, mirrored MUST and ECP repair.
    pub fn replication(self) -> bool {
        matches!(self, Scheme::Rimr | Scheme::Rimre)
    }

    pub fn transients(self) -> bool {
        self == Scheme::Rimre
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Baseline => "baseline",
            Scheme::Ri => "ri",
            Scheme::Rim => "rim",
            Scheme::Rimr => "rimr",
            Scheme::Rimre => "rimre",
        })
    }
}

impl FromStr for Scheme {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scheme::ALL.into_iter().find(|k| k.to_string() == s.to_ascii_lowercase()).ok_or_else(|| SimError::Config(format!("unknown scheme `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OramConfig {
    pub scheme: Scheme,
    pub tree_levels: usize,
    pub cached_levels: usize,
    /// Read paths per eviction.
    pub evict_rate: u64,
    pub stash_capacity: usize,
    pub utilization: f64,
    /// Stash fill fractions that start and stop dummy accesses.
    pub relief_high: f64,
    pub relief_low: f64,
    pub leaf_span: usize,
    pub nonleaf_span: usize,
    pub mac_units: usize,
    pub mac_latency: u64,
    pub block_ticks: u64,
    pub seed: u64,
    /// Ticks between injected transient errors (rimre).
    pub transient_period: u64,
    pub must_spares: u64,
    pub remap_capacity: usize,
    /// Defaults to the standard geometry, grown if the layout needs more.
    pub dram: Option<DramGeometry>,
}

impl Default for OramConfig {
    fn default() -> Self {
        OramConfig {
            scheme: Scheme::Rimr,
            tree_levels: 23,
            cached_levels: 7,
            evict_rate: 5,
            stash_capacity: 8192,
            utilization: 0.8,
            relief_high: 0.9,
            relief_low: 0.75,
            leaf_span: 5,
            nonleaf_span: 3,
            mac_units: 4,
            mac_latency: 80,
            block_ticks: 16,
            seed: 1,
            transient_period: 8_000_000,
            must_spares: 64,
            remap_capacity: crate::ecp::RemapTable::DEFAULT_CAPACITY,
            dram: None,
        }
    }
}

impl OramConfig {
    /// A small tree for tests and campaigns.
    pub fn toy(scheme: Scheme, tree_levels: usize, seed: u64) -> Self {
        OramConfig { scheme, tree_levels, cached_levels: (tree_levels / 3).max(1), seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.tree_levels < 2 || self.tree_levels > 31 {
            return bad("tree_levels must be in 2..=31");
        }
        if self.cached_levels == 0 || self.cached_levels >= self.tree_levels {
            return bad("cached_levels must be in 1..tree_levels");
        }
        if self.evict_rate == 0 {
            return bad("evict_rate must be positive");
        }
        if self.stash_capacity == 0 {
            return bad("stash_capacity must be positive");
        }
        if !(self.utilization > 0.0 && self.utilization <= 1.0) {
            return bad("utilization must be in (0, 1]");
        }
        if !(0.0 < self.relief_low && self.relief_low < self.relief_high && self.relief_high <= 1.0) {
            return bad("relief thresholds must satisfy 0 < low < high <= 1");
        }
        if self.mac_units == 0 {
            return bad("mac_units must be positive");
        }
        if self.block_ticks == 0 {
            return bad("block_ticks must be positive");
        }
        if self.transient_period == 0 {
            return bad("transient_period must be positive");
        }
        Ok(())
    }

    pub fn leaves(&self) -> u64 {
        1 << (self.tree_levels - 1)
    }

    pub fn buckets(&self) -> u64 {
        (1 << self.tree_levels) - 1
    }

    /// Logical blocks the tree holds at the configured utilization.
    pub fn logical_capacity(&self) -> u64 {
        ((self.buckets() * crate::codec::Z as u64) as f64 * self.utilization) as u64
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("integrity violation: {0}")]
    Integrity(String),
    #[error("unrecoverable reliability failure: {0}")]
    Reliability(String),
    #[error("stash overflow: {0} blocks")]
    StashOverflow(usize),
    #[error(transparent)]
    Dram(#[from] DramError),
}

impl From<MustError> for SimError {
    fn from(e: MustError) -> Self {
        SimError::Config(e.to_string())
    }
}

impl SimError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            SimError::Integrity(_) => 2,
            SimError::Reliability(_) | SimError::StashOverflow(_) => 3,
            SimError::Config(_) | SimError::Dram(_) => 1,
        }
    }
}
