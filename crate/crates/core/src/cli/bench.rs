//! Timing table for the region loss forward and gradient pass.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::Result;
use crate::par::Exec;
use crate::region_loss::{LogitsCube, RegionSmoothLoss};
use crate::region_prior::random_superpixels;
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    /// Requested superpixel sites.
    pub sites: usize,
    /// Regions actually produced (site collisions merge cells).
    pub regions: usize,
    pub classes: usize,
    pub repeats: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mpix_per_s: f64,
}

/// Nearest-rank percentile of sorted samples.
fn rank(sorted: &[f64], q: f64) -> f64 {
    let i = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[i - 1]
}

pub fn run_bench(
    sizes: &[usize],
    sites: &[usize],
    classes: usize,
    repeats: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<BenchRow>> {
    let loss = RegionSmoothLoss::default().with_exec(exec);
    let mut rows = Vec::new();
    for &size in sizes {
        for &q in sites {
            let mut rng = SeededRng::new(seed ^ (size as u64) << 32 ^ q as u64);
            let map = random_superpixels(size, size, q, rng.below(usize::MAX >> 1) as u64)?;
            let logits = (0..classes * size * size).map(|_| rng.range(-3.0, 3.0)).collect();
            let pred = LogitsCube::new([1, classes, size, size], logits)?;
            let maps = std::slice::from_ref(&map);
            let mut times = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let start = Instant::now();
                let (l, g) = loss.forward_backward(&pred, maps)?;
                std::hint::black_box((l, g));
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
            times.sort_by(f64::total_cmp);
            let median_ms = rank(&times, 0.5);
            rows.push(BenchRow {
                size,
                sites: q,
                regions: map.region_count(),
                classes,
                repeats,
                median_ms,
                p95_ms: rank(&times, 0.95),
                mpix_per_s: (size * size) as f64 / (median_ms * 1e3),
            });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("height,width,sites,regions,classes,repeats,median_ms,p95_ms,mpix_per_s\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{:.4},{:.4},{:.3}",
            r.size, r.size, r.sites, r.regions, r.classes, r.repeats, r.median_ms, r.p95_ms, r.mpix_per_s
        )
        .unwrap();
    }
    s
}
