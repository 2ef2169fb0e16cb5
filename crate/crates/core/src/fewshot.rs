//! Few-shot label sampling, spatio-temporal augmentation and channel normalisation.

use std::collections::BTreeMap;

use crate::cloud_screen::FrameQuality;
use crate::cube::SitsCube;
use crate::error::{ensure, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub ratio: f64,
    pub seed: u64,
    pub population: usize,
    /// Sorted, distinct indices into `0..population`.
    pub selected: Vec<usize>,
}

/// `max(1, round(ratio * population))`.
pub fn split_size(ratio: f64, population: usize) -> usize {
    ((ratio * population as f64).round() as usize).clamp(1, population)
}

fn check_ratio(ratio: f64) -> Result<()> {
    ensure!(
        ratio > 0.0 && ratio <= 1.0,
        Validation,
        "ratio must lie in (0, 1], got {}",
        ratio
    );
    Ok(())
}

/// First `m` entries of a partial Fisher-Yates shuffle of `0..n`: for
/// `i in 0..m`, swap position `i` with `i + below(n - i)`.
fn draw_without_replacement(rng: &mut SeededRng, n: usize, m: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = i + rng.below(n - i);
        pool.swap(i, j);
    }
    pool.truncate(m);
    pool
}

/// Uniform sample of patches without replacement.
pub fn sample_split(ratio: f64, seed: u64, population: usize) -> Result<SplitSpec> {
    check_ratio(ratio)?;
    ensure!(population >= 1, Validation, "population must be at least 1");
    let m = split_size(ratio, population);
    let mut rng = SeededRng::new(seed);
    let mut selected = draw_without_replacement(&mut rng, population, m);
    selected.sort_unstable();
    Ok(SplitSpec {
        ratio,
        seed,
        population,
        selected,
    })
}

/// Per-class variant: each class (in ascending class order) contributes
/// `max(1, round(ratio * n_class))` members drawn with the stream
/// `seed ^ class_rank`.
pub fn sample_split_stratified(ratio: f64, seed: u64, classes: &[i32]) -> Result<SplitSpec> {
    check_ratio(ratio)?;
    ensure!(!classes.is_empty(), Validation, "population must be at least 1");
    let mut members: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, &c) in classes.iter().enumerate() {
        members.entry(c).or_default().push(i);
    }
    let mut selected = Vec::new();
    for (rank, idx) in members.values().enumerate() {
        let mut rng = SeededRng::for_item(seed, rank as u64);
        let m = split_size(ratio, idx.len());
        selected.extend(
            draw_without_replacement(&mut rng, idx.len(), m)
                .into_iter()
                .map(|i| idx[i]),
        );
    }
    selected.sort_unstable();
    Ok(SplitSpec {
        ratio,
        seed,
        population: classes.len(),
        selected,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub crop: usize,
    pub temporal_drop: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            crop: 64,
            temporal_drop: (0.1, 0.3),
            seed: 42,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.temporal_drop;
        ensure!(self.crop >= 1, Validation, "crop must be at least 1");
        ensure!(
            0.0 <= lo && lo <= hi && hi < 1.0,
            Validation,
            "temporal dropout range must satisfy 0 <= lo <= hi < 1, got [{}, {}]",
            lo,
            hi
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub cube: SitsCube,
    pub labels: Vec<i32>,
    /// `(row, column)` of the window's top-left corner.
    pub offset: (usize, usize),
}

/// Cuts the same `crop x crop` window from every frame, channel and the label image.
pub fn spatial_crop(cube: &SitsCube, labels: &[i32], spec: &AugmentSpec, rng: &mut SeededRng) -> Result<Crop> {
    spec.validate()?;
    let [t, c, h, w] = cube.shape();
    ensure!(
        labels.len() == h * w,
        Validation,
        "labels have {} pixels, cube frames have {}",
        labels.len(),
        h * w
    );
    ensure!(
        spec.crop <= h && spec.crop <= w,
        Validation,
        "crop {} larger than image {}x{}",
        spec.crop,
        h,
        w
    );
    let s = spec.crop;
    let y0 = rng.below(h - s + 1);
    let x0 = rng.below(w - s + 1);
    let window = |plane: &[f32], out: &mut Vec<f32>| {
        for y in y0..y0 + s {
            out.extend_from_slice(&plane[y * w + x0..y * w + x0 + s]);
        }
    };
    let mut values = Vec::with_capacity(t * c * s * s);
    for ti in 0..t {
        for ci in 0..c {
            window(cube.plane(ti, ci), &mut values);
        }
    }
    let mut cropped_labels = Vec::with_capacity(s * s);
    for y in y0..y0 + s {
        cropped_labels.extend_from_slice(&labels[y * w + x0..y * w + x0 + s]);
    }
    Ok(Crop {
        cube: cube.with_values([t, c, s, s], values)?,
        labels: cropped_labels,
        offset: (y0, x0),
    })
}

/// Drops frames independently with a rate drawn uniformly from the spec's
/// range. When every frame would be dropped the least-cloudy frame (or frame
/// 0 without quality information) is kept. Temporal order is preserved.
pub fn temporal_dropout(
    cube: &SitsCube,
    spec: &AugmentSpec,
    rng: &mut SeededRng,
    quality: Option<&FrameQuality>,
) -> Result<(SitsCube, Vec<usize>)> {
    spec.validate()?;
    let (lo, hi) = spec.temporal_drop;
    let rate = rng.range(lo, hi);
    let mut kept: Vec<usize> = (0..cube.frames()).filter(|_| rng.uniform() >= rate).collect();
    if kept.is_empty() {
        kept.push(quality.map_or(0, |q| q.least_cloudy()));
    }
    Ok((cube.select_frames(&kept)?, kept))
}

/// Lower bound applied to every channel's standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-channel mean and population standard deviation over every pixel and frame.
pub fn fit_norm(cubes: &[&SitsCube]) -> Result<NormStats> {
    ensure!(
        !cubes.is_empty(),
        Validation,
        "cannot fit normalisation on an empty set"
    );
    let c = cubes[0].channels();
    ensure!(
        cubes.iter().all(|q| q.channels() == c),
        Validation,
        "cubes disagree on channel count"
    );
    let mut sum = vec![0.0f64; c];
    let mut count = vec![0usize; c];
    for cube in cubes {
        for t in 0..cube.frames() {
            for ch in 0..c {
                sum[ch] += cube.plane(t, ch).iter().map(|&v| v as f64).sum::<f64>();
                count[ch] += cube.pixels();
            }
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
    let mut sq = vec![0.0f64; c];
    for cube in cubes {
        for t in 0..cube.frames() {
            for ch in 0..c {
                sq[ch] += cube
                    .plane(t, ch)
                    .iter()
                    .map(|&v| (v as f64 - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
    }
    let std = sq
        .iter()
        .zip(&count)
        .map(|(s, &n)| (s / n as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(NormStats { mean, std })
}

fn map_channels(cube: &SitsCube, stats: &NormStats, f: impl Fn(f64, f64, f64) -> f64) -> Result<SitsCube> {
    ensure!(
        stats.mean.len() == cube.channels(),
        Validation,
        "stats cover {} channels, cube has {}",
        stats.mean.len(),
        cube.channels()
    );
    let [t, c, h, w] = cube.shape();
    let hw = h * w;
    let values = cube
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / hw) % c;
            f(v as f64, stats.mean[ch], stats.std[ch]) as f32
        })
        .collect();
    cube.with_values([t, c, h, w], values)
}

/// `(v - mean) / std` per channel.
pub fn apply_norm(cube: &SitsCube, stats: &NormStats) -> Result<SitsCube> {
    map_channels(cube, stats, |v, m, s| (v - m) / s)
}

/// Inverse of [`apply_norm`].
pub fn invert_norm(cube: &SitsCube, stats: &NormStats) -> Result<SitsCube> {
    map_channels(cube, stats, |v, m, s| v * s + m)
}
