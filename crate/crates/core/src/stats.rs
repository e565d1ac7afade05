//! Run counters and the versioned report written by the harness.

use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Raw counters kept by the controller.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub accesses: u64,
    pub read_paths: u64,
    pub dummy_accesses: u64,
    pub evictions: u64,
    pub early_reshuffles: u64,
    /// Reshuffles forced by newly found stuck cells.
    pub repair_reshuffles: u64,
    pub meta_reads: u64,
    pub meta_writes: u64,
    pub data_reads: u64,
    pub data_writes: u64,
    pub must_primary_reads: u64,
    pub must_primary_writes: u64,
    pub must_mirror_reads: u64,
    pub must_mirror_writes: u64,
    pub recovery_reads: u64,
    pub recovery_writes: u64,
    /// MAC mismatches of any origin.
    pub detections: u64,
    /// Detections that could not be repaired.
    pub violations: u64,
    pub recoveries_case1: u64,
    pub recoveries_case2: u64,
    pub recoveries_case3: u64,
    pub must_repairs: u64,
    pub transient_errors: u64,
    pub permanent_errors: u64,
    pub bucket_remaps: u64,
    pub must_relocations: u64,
    pub injected_transients: u64,
}

impl Counters {
    pub fn block_reads(&self) -> u64 {
        self.meta_reads + self.data_reads + self.must_primary_reads + self.must_mirror_reads + self.recovery_reads
    }

    pub fn block_writes(&self) -> u64 {
        self.meta_writes + self.data_writes + self.must_primary_writes + self.must_mirror_writes + self.recovery_writes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub schema_version: u32,
    pub scheme: String,
    pub seed: u64,
    pub tree_levels: usize,
    pub ops: u64,
    #[serde(flatten)]
    pub counters: Counters,
    pub block_reads: u64,
    pub block_writes: u64,
    /// Early reshuffles per read path.
    pub early_reshuffle_pct: f64,
    /// Recovery traffic as a fraction of all block operations.
    pub recovery_overhead: f64,
    pub mac_submissions: u64,
    pub mac_queue_wait: u64,
    pub ticks: u64,
    pub stash_peak: usize,
}

impl StatsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Field names in report order.
    pub fn csv_header(&self) -> Vec<String> {
        self.flat().into_iter().map(|(k, _)| k).collect()
    }

    pub fn to_csv(&self) -> String {
        let flat = self.flat();
        let head: Vec<&str> = flat.iter().map(|(k, _)| k.as_str()).collect();
        let row: Vec<String> = flat.iter().map(|(_, v)| v.clone()).collect();
        format!("{}\n{}\n", head.join(","), row.join(","))
    }

    fn flat(&self) -> Vec<(String, String)> {
        let v = serde_json::to_value(self).expect("report serializes");
        let obj = v.as_object().expect("report is an object");
        obj.iter()
            .map(|(k, v)| {
                let s = match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.clone(), s)
            })
            .collect()
    }

    /// Checks a parsed JSON report: schema version and every field present.
    pub fn validate_json(text: &str) -> Result<StatsReport, String> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        match v.get("schema_version").and_then(|x| x.as_u64()) {
            Some(n) if n == SCHEMA_VERSION as u64 => {}
            other => return Err(format!("unsupported schema_version {other:?}")),
        }
        serde_json::from_value(v).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> StatsReport {
        StatsReport {
            schema_version: SCHEMA_VERSION,
            scheme: "rimr".into(),
            seed: 3,
            tree_levels: 10,
            ops: 2,
            counters: Counters { accesses: 2, meta_reads: 14, ..Default::default() },
            block_reads: 14,
            block_writes: 0,
            early_reshuffle_pct: 0.0,
            recovery_overhead: 0.0,
            mac_submissions: 0,
            mac_queue_wait: 0,
            ticks: 100,
            stash_peak: 1,
        }
    }

    #[test]
    fn json_round_trips() {
        let r = sample();
        assert_eq!(StatsReport::validate_json(&r.to_json()).unwrap(), r);
        let broken = r.to_json().replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(StatsReport::validate_json(&broken).is_err());
    }

    #[test]
    fn csv_has_matching_columns() {
        let csv = sample().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
        assert!(lines[0].starts_with("schema_version,scheme,"));
    }
}
