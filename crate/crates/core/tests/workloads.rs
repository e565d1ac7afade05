use std::collections::HashMap;

use iro_core::codec::{pack_ecc_area, unpack_ecc_area};
use iro_core::crypto::Mac54;
use iro_core::sim::{generate_trace, Workload};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn histogram(kind: Workload, n: usize, footprint: u64, seed: u64) -> HashMap<u64, usize> {
    let mut h = HashMap::new();
    for r in generate_trace(kind, n, footprint, seed) {
        *h.entry(r.addr).or_default() += 1;
    }
    h
}

#[test]
fn uniform_addresses_pass_chi_square() {
    let (n, fp) = (200_000, 256u64);
    let h = histogram(Workload::Uniform, n, fp, 21);
    let e = n as f64 / fp as f64;
    let stat: f64 = (0..fp).map(|a| (h.get(&a).copied().unwrap_or(0) as f64 - e).powi(2) / e).sum();
    let p = 1.0 - ChiSquared::new((fp - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.001, "chi-square {stat:.1}, p = {p:.2e}");
}

#[test]
fn zipfian_follows_harmonic_weights() {
    let (n, fp) = (400_000, 100u64);
    let h = histogram(Workload::Zipfian, n, fp, 22);
    let harmonic: f64 = (1..=fp).map(|k| 1.0 / k as f64).sum();
    for rank in 1..=10u64 {
        let expected = n as f64 / (rank as f64 * harmonic);
        let got = h.get(&(rank - 1)).copied().unwrap_or(0) as f64;
        assert!((got - expected).abs() / expected < 0.05, "rank {rank}: {got} vs {expected:.0}");
    }
}

#[test]
fn ecc_area_matches_pinned_vectors() {
    let text = include_str!("fixtures/ecc_area.txt");
    let mut rows = 0;
    for line in text.lines().filter(|l| !l.starts_with('#')) {
        let f: Vec<u64> = line.split_whitespace().map(|x| u64::from_str_radix(x, 16).unwrap()).collect();
        let (mac, ctr, packed) = (f[0], f[1] as u16, f[2]);
        assert_eq!(pack_ecc_area(Mac54::new(mac), ctr), packed, "{line}");
        assert_eq!(unpack_ecc_area(packed), (Mac54::new(mac), ctr));
        rows += 1;
    }
    assert_eq!(rows, 16);
}
