//! Seeded synthetic scenes: Voronoi parcels with class-specific seasonal
//! signals, Gaussian noise and bright cloud blobs on a subset of frames.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::cube::{BandMap, SitsCube};
use crate::error::{ensure, Result};
use crate::region_prior::{connected_components, nearest_site, RegionMap};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub frames: usize,
    /// At least 5: the first five channels carry B2, B3, B4, B8, B12.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub noise_sigma: f64,
    pub clouds: bool,
    /// Chance that a frame receives a cloud blob.
    pub cloud_prob: f64,
    /// Reflectance added inside a blob.
    pub cloud_brightness: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 12,
            channels: 5,
            height: 64,
            width: 64,
            classes: 5,
            noise_sigma: 0.05,
            clouds: true,
            cloud_prob: 0.5,
            cloud_brightness: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub cube: SitsCube,
    /// Class per pixel, `[H, W]`.
    pub labels: Vec<i32>,
    /// Connected components of `labels`.
    pub regions: RegionMap,
    pub cloud_frames: Vec<usize>,
}

pub const SITES_PER_CLASS: usize = 3;

pub fn synth_sits(seed: u64, cfg: &SynthConfig) -> Result<SynthScene> {
    let SynthConfig {
        frames: t,
        channels: c,
        height: h,
        width: w,
        classes: k,
        ..
    } = *cfg;
    ensure!(k >= 2, Validation, "need at least 2 classes, got {}", k);
    ensure!(
        c >= 5,
        Validation,
        "need at least 5 channels for the band map, got {}",
        c
    );
    ensure!(t >= 1 && h >= 1 && w >= 1, Validation, "extents must be at least 1");
    ensure!(cfg.noise_sigma >= 0.0, Validation, "noise sigma must be nonnegative");

    let mut rng = SeededRng::new(seed);
    let sites: Vec<(usize, usize)> = (0..k * SITES_PER_CLASS).map(|_| (rng.below(h), rng.below(w))).collect();
    let labels: Vec<i32> = (0..h * w)
        .map(|i| (nearest_site(i / w, i % w, &sites) % k) as i32)
        .collect();

    // [class][channel] -> (base, amplitude, phase)
    let signal: Vec<Vec<(f64, f64, f64)>> = (0..k)
        .map(|_| {
            (0..c)
                .map(|_| {
                    (
                        rng.range(0.02, 0.18),
                        rng.range(0.01, 0.05),
                        rng.range(0.0, std::f64::consts::TAU),
                    )
                })
                .collect()
        })
        .collect();

    let mut cloud_frames: Vec<usize> = if cfg.clouds {
        (0..t).filter(|_| rng.uniform() < cfg.cloud_prob).collect()
    } else {
        Vec::new()
    };
    if cfg.clouds && t >= 2 {
        if cloud_frames.is_empty() {
            cloud_frames.push(rng.below(t));
        } else if cloud_frames.len() == t {
            cloud_frames.remove(rng.below(t));
        }
    }
    let radius = (h.max(w) / 4).max(1);

    let hw = h * w;
    let mut values = vec![0.0f32; t * c * hw];
    for ti in 0..t {
        let blob = cloud_frames.contains(&ti).then(|| (rng.below(h), rng.below(w)));
        let season = std::f64::consts::TAU * ti as f64 / t as f64;
        for ci in 0..c {
            let plane = &mut values[(ti * c + ci) * hw..(ti * c + ci + 1) * hw];
            for (j, v) in plane.iter_mut().enumerate() {
                let (base, amp, phase) = signal[labels[j] as usize][ci];
                let noise: f64 = if cfg.noise_sigma > 0.0 {
                    cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                let mut x = (base + amp * (season + phase).sin() + noise) as f32;
                if let Some((by, bx)) = blob {
                    let (y, xx) = (j / w, j % w);
                    if y.abs_diff(by).pow(2) + xx.abs_diff(bx).pow(2) <= radius * radius {
                        x += cfg.cloud_brightness;
                    }
                }
                *v = x.max(0.0);
            }
        }
    }

    let cube = SitsCube::from_reflectance([t, c, h, w], values, BandMap::default())?;
    let regions = RegionMap::from_partition(h, w, &connected_components(&labels, h, w))?;
    Ok(SynthScene {
        cube,
        labels,
        regions,
        cloud_frames,
    })
}
