//! Temporal composites and the sharpness-weighted fused RGB image.

use crate::cloud_screen::FrameQuality;
use crate::cube::{Band, SitsCube};
use crate::error::{ensure, Error, Result};
use crate::par::Exec;

/// Weight floor so frames with zero normalised sharpness still contribute.
pub const WEIGHT_FLOOR: f64 = 1e-6;

/// Per-pixel aggregate `[C, H, W]` over the chosen frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

fn check_frames(cube: &SitsCube, frames: &[usize]) -> Result<()> {
    ensure!(!frames.is_empty(), Validation, "composite needs at least one frame");
    for &f in frames {
        ensure!(
            f < cube.frames(),
            Validation,
            "frame {} out of range 0..{}",
            f,
            cube.frames()
        );
    }
    Ok(())
}

pub fn composite_mean(cube: &SitsCube, frames: &[usize]) -> Result<Composite> {
    check_frames(cube, frames)?;
    let [_, c, h, w] = cube.shape();
    let n = c * h * w;
    let mut acc = vec![0.0f64; n];
    for &f in frames {
        for (a, &v) in acc.iter_mut().zip(cube.frame(f)) {
            *a += v as f64;
        }
    }
    let k = frames.len() as f64;
    Ok(Composite {
        channels: c,
        height: h,
        width: w,
        values: acc.into_iter().map(|a| (a / k) as f32).collect(),
    })
}

pub fn composite_median(cube: &SitsCube, frames: &[usize]) -> Result<Composite> {
    composite_median_with(cube, frames, Exec::default())
}

pub fn composite_median_with(cube: &SitsCube, frames: &[usize], exec: Exec) -> Result<Composite> {
    check_frames(cube, frames)?;
    let [_, c, h, w] = cube.shape();
    let n = c * h * w;
    let mut values = vec![0.0f32; n];
    exec.for_each_chunk_mut(&mut values, 4096, |ci, chunk| {
        let mut buf = Vec::with_capacity(frames.len());
        for (j, out) in chunk.iter_mut().enumerate() {
            let idx = ci * 4096 + j;
            buf.clear();
            buf.extend(frames.iter().map(|&f| cube.frame(f)[idx]));
            *out = median_in_place(&mut buf);
        }
    });
    Ok(Composite {
        channels: c,
        height: h,
        width: w,
        values,
    })
}

/// Median of a nonempty buffer; even counts average the two middle values.
fn median_in_place(buf: &mut [f32]) -> f32 {
    buf.sort_unstable_by(|a, b| a.total_cmp(b));
    let m = buf.len() / 2;
    if buf.len() % 2 == 1 {
        buf[m]
    } else {
        ((buf[m - 1] as f64 + buf[m] as f64) / 2.0) as f32
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stretch {
    /// Clamp reflectance to `[0, 1]` without rescaling.
    Off,
    MinMax,
    /// Per-channel percentile range, e.g. `(2.0, 98.0)`.
    Percentile(f64, f64),
}

impl Default for Stretch {
    fn default() -> Self {
        Stretch::Percentile(2.0, 98.0)
    }
}

/// `off`, `minmax`, `percentile` (2-98) or `percentile:LO:HI`.
impl std::str::FromStr for Stretch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "off" => return Ok(Stretch::Off),
            "minmax" => return Ok(Stretch::MinMax),
            "percentile" => return Ok(Stretch::default()),
            _ => {}
        }
        let bad = || Error::Config(format!("unknown stretch {s:?} (off, minmax, percentile[:lo:hi])"));
        let rest = s.strip_prefix("percentile:").ok_or_else(bad)?;
        let (lo, hi) = rest.split_once(':').ok_or_else(bad)?;
        let lo: f64 = lo.parse().map_err(|_| bad())?;
        let hi: f64 = hi.parse().map_err(|_| bad())?;
        ensure!(
            0.0 <= lo && lo < hi && hi <= 100.0,
            Config,
            "percentile range must satisfy 0 <= lo < hi <= 100, got {}:{}",
            lo,
            hi
        );
        Ok(Stretch::Percentile(lo, hi))
    }
}

impl std::fmt::Display for Stretch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stretch::Off => f.write_str("off"),
            Stretch::MinMax => f.write_str("minmax"),
            Stretch::Percentile(lo, hi) => write!(f, "percentile:{lo}:{hi}"),
        }
    }
}

/// Fused true-colour image `[3, H, W]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedRgb {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub source_frames: Vec<usize>,
    pub weights: Vec<f64>,
}

impl FusedRgb {
    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.values[c * hw..(c + 1) * hw]
    }

    /// Per-pixel mean of the three channels.
    pub fn gray(&self) -> Vec<f32> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        (0..r.len()).map(|i| (r[i] + g[i] + b[i]) / 3.0).collect()
    }
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f32], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac
}

/// Stretches one channel into `[0, 1]`. A degenerate range maps to zeros.
pub fn stretch_channel(values: &[f32], mode: Stretch) -> Vec<f32> {
    let (lo, hi) = match mode {
        Stretch::Off => return values.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        Stretch::MinMax => {
            let lo = values.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
            let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            (lo, hi)
        }
        Stretch::Percentile(p_lo, p_hi) => {
            let mut sorted = values.to_vec();
            sorted.sort_unstable_by(|a, b| a.total_cmp(b));
            (percentile(&sorted, p_lo), percentile(&sorted, p_hi))
        }
    };
    let span = hi - lo;
    if span <= 0.0 {
        return vec![0.0; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v as f64 - lo) / span).clamp(0.0, 1.0) as f32)
        .collect()
}

/// Stretched true-colour planes (R = B4, G = B3, B = B2) of one frame.
pub fn stretched_rgb(cube: &SitsCube, t: usize, mode: Stretch) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(3 * cube.pixels());
    for band in [Band::B4, Band::B3, Band::B2] {
        out.extend(stretch_channel(cube.band(t, band)?, mode));
    }
    Ok(out)
}

/// Normalised fusion weights `max(sharpness, 1e-6)` over the clear frames.
pub fn fusion_weights(fq: &FrameQuality) -> Vec<f64> {
    let raw: Vec<f64> = fq
        .clear_set
        .iter()
        .map(|&t| fq.sharpness[t].max(WEIGHT_FLOOR))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

pub fn fuse_rgb(cube: &SitsCube, fq: &FrameQuality, mode: Stretch) -> Result<FusedRgb> {
    fuse_rgb_with(cube, fq, mode, Exec::default())
}

pub fn fuse_rgb_with(cube: &SitsCube, fq: &FrameQuality, mode: Stretch, exec: Exec) -> Result<FusedRgb> {
    for band in [Band::B4, Band::B3, Band::B2] {
        cube.band_map().index(band)?;
    }
    ensure!(
        fq.frames() == cube.frames(),
        Validation,
        "frame quality covers {} frames, cube has {}",
        fq.frames(),
        cube.frames()
    );
    let weights = fusion_weights(fq);
    let frames = fq.clear_set.clone();
    let stretched = exec.map_slice(&frames, |&t| stretched_rgb(cube, t, mode));
    let stretched = stretched.into_iter().collect::<Result<Vec<_>>>()?;

    let n = 3 * cube.pixels();
    let mut acc = vec![0.0f64; n];
    for (frame, &w) in stretched.iter().zip(&weights) {
        for (a, &v) in acc.iter_mut().zip(frame) {
            *a += w * v as f64;
        }
    }
    Ok(FusedRgb {
        height: cube.height(),
        width: cube.width(),
        values: acc.into_iter().map(|a| (a as f32).clamp(0.0, 1.0)).collect(),
        source_frames: frames,
        weights,
    })
}

/// `round(255 * v)` with halves away from zero, clipped to `[0, 255]`.
pub fn to_uint8(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| (255.0 * v as f64).round().clamp(0.0, 255.0) as u8)
        .collect()
}
