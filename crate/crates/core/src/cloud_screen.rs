//! Spectral-threshold cloud detection and per-frame quality scoring.
//!
//! A pixel is cloudy when `B2 > 0.2`, `B8 > 0.3`, `B12 > 0.2` and
//! `NDWI < 0.9` all hold, with `NDWI = (B3 - B8) / (B3 + B8 + 1e-8)`.
//! Frames with a cloud ratio below 0.8 are "clear"; among them the frame
//! maximising `-10 * cloud_ratio + brightness + sharpness` is the reference.

use crate::cube::{Band, SitsCube};
use crate::error::Result;
use crate::par::Exec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudParams {
    pub b2_min: f64,
    pub b8_min: f64,
    pub b12_min: f64,
    pub ndwi_max: f64,
    /// Green/NIR pair for the water index.
    pub ndwi_bands: (Band, Band),
    pub ndwi_eps: f64,
    /// Frames strictly below this cloud ratio are clear.
    pub clear_threshold: f64,
}

impl Default for CloudParams {
    fn default() -> Self {
        Self {
            b2_min: 0.2,
            b8_min: 0.3,
            b12_min: 0.2,
            ndwi_max: 0.9,
            ndwi_bands: (Band::B3, Band::B8),
            ndwi_eps: 1e-8,
            clear_threshold: 0.8,
        }
    }
}

impl CloudParams {
    #[inline]
    pub fn ndwi(&self, green: f32, nir: f32) -> f64 {
        let (g, n) = (green as f64, nir as f64);
        (g - n) / (g + n + self.ndwi_eps)
    }

    #[inline]
    pub fn is_cloudy(&self, b2: f32, b8: f32, b12: f32, green: f32, nir: f32) -> bool {
        b2 as f64 > self.b2_min
            && b8 as f64 > self.b8_min
            && b12 as f64 > self.b12_min
            && self.ndwi(green, nir) < self.ndwi_max
    }
}

/// Binary cloud mask `[H, W]` of frame `t`.
pub fn cloud_mask(cube: &SitsCube, t: usize, params: &CloudParams) -> Result<Vec<bool>> {
    let b2 = cube.band(t, Band::B2)?;
    let b8 = cube.band(t, Band::B8)?;
    let b12 = cube.band(t, Band::B12)?;
    let green = cube.band(t, params.ndwi_bands.0)?;
    let nir = cube.band(t, params.ndwi_bands.1)?;
    Ok((0..cube.pixels())
        .map(|i| params.is_cloudy(b2[i], b8[i], b12[i], green[i], nir[i]))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameQuality {
    pub cloud_ratio: Vec<f64>,
    pub brightness: Vec<f64>,
    pub sharpness: Vec<f64>,
    pub score: Vec<f64>,
    pub clear_set: Vec<usize>,
    pub best_frame: usize,
}

impl FrameQuality {
    /// Assembles scores, clear set and reference frame from per-frame measurements.
    pub fn from_parts(cloud_ratio: Vec<f64>, brightness: Vec<f64>, sharpness: Vec<f64>, clear_threshold: f64) -> Self {
        assert!(!cloud_ratio.is_empty(), "at least one frame is required");
        assert_eq!(cloud_ratio.len(), brightness.len());
        assert_eq!(cloud_ratio.len(), sharpness.len());
        let score: Vec<f64> = (0..cloud_ratio.len())
            .map(|t| frame_score(cloud_ratio[t], brightness[t], sharpness[t]))
            .collect();
        let clear_set = select_clear_frames(&cloud_ratio, clear_threshold);
        let mut best_frame = clear_set[0];
        for &t in &clear_set[1..] {
            if score[t] > score[best_frame] {
                best_frame = t;
            }
        }
        Self {
            cloud_ratio,
            brightness,
            sharpness,
            score,
            clear_set,
            best_frame,
        }
    }

    pub fn frames(&self) -> usize {
        self.cloud_ratio.len()
    }

    /// Frame with the lowest cloud ratio (lowest index on ties).
    pub fn least_cloudy(&self) -> usize {
        argmin(&self.cloud_ratio)
    }
}

#[inline]
pub fn frame_score(cloud_ratio: f64, brightness: f64, sharpness: f64) -> f64 {
    -10.0 * cloud_ratio + brightness + sharpness
}

/// Ascending indices with `cloud_ratio < threshold`; falls back to the
/// single least-cloudy frame when none qualifies.
pub fn select_clear_frames(cloud_ratio: &[f64], threshold: f64) -> Vec<usize> {
    let clear: Vec<usize> = (0..cloud_ratio.len()).filter(|&t| cloud_ratio[t] < threshold).collect();
    if clear.is_empty() && !cloud_ratio.is_empty() {
        vec![argmin(cloud_ratio)]
    } else {
        clear
    }
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = i;
        }
    }
    best
}

pub fn frame_quality(cube: &SitsCube, params: &CloudParams) -> Result<FrameQuality> {
    frame_quality_with(cube, params, Exec::default())
}

pub fn frame_quality_with(cube: &SitsCube, params: &CloudParams, exec: Exec) -> Result<FrameQuality> {
    // Fail on missing bands before fanning out.
    for band in [Band::B2, Band::B3, Band::B4, Band::B8, Band::B12] {
        cube.band_map().index(band)?;
    }
    let per_frame = exec.map_range(cube.frames(), |t| -> Result<(f64, f64, f64)> {
        let mask = cloud_mask(cube, t, params)?;
        let cloudy = mask.iter().filter(|&&m| m).count();
        let gray = true_color_gray(cube, t)?;
        let brightness = gray.iter().map(|&g| g as f64).sum::<f64>() / gray.len() as f64;
        let sharp = laplacian_variance(&gray, cube.height(), cube.width());
        Ok((cloudy as f64 / mask.len() as f64, brightness, sharp))
    });
    let mut ratio = Vec::with_capacity(cube.frames());
    let mut bright = Vec::with_capacity(cube.frames());
    let mut sharp = Vec::with_capacity(cube.frames());
    for r in per_frame {
        let (c, b, s) = r?;
        ratio.push(c);
        bright.push(b);
        sharp.push(s);
    }
    min_max_normalize(&mut sharp);
    Ok(FrameQuality::from_parts(ratio, bright, sharp, params.clear_threshold))
}

/// Grayscale of the true-colour composite: mean of B4, B3, B2 each clamped to `[0, 1]`.
pub fn true_color_gray(cube: &SitsCube, t: usize) -> Result<Vec<f32>> {
    let r = cube.band(t, Band::B4)?;
    let g = cube.band(t, Band::B3)?;
    let b = cube.band(t, Band::B2)?;
    Ok((0..cube.pixels())
        .map(|i| (r[i].clamp(0.0, 1.0) + g[i].clamp(0.0, 1.0) + b[i].clamp(0.0, 1.0)) / 3.0)
        .collect())
}

/// Population variance of the 4-neighbour Laplacian with replicate padding.
pub fn laplacian_variance(img: &[f32], h: usize, w: usize) -> f64 {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        img[y * w + x] as f64
    };
    let n = (h * w) as f64;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let l = at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x);
            sum += l;
            sq += l * l;
        }
    }
    let mean = sum / n;
    (sq / n - mean * mean).max(0.0)
}

/// Spans below this fraction of the largest magnitude (f32 input noise)
/// count as all-equal.
const DEGENERATE_SPAN: f64 = 1e-6;

/// Rescales to `[0, 1]`; an (almost) all-equal input becomes all zeros.
fn min_max_normalize(v: &mut [f64]) {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let degenerate = span <= DEGENERATE_SPAN * lo.abs().max(hi.abs());
    for x in v.iter_mut() {
        *x = if degenerate { 0.0 } else { (*x - lo) / span };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cube::BandMap;

    fn pixel_cube(b2: f32, b3: f32, b8: f32, b12: f32) -> SitsCube {
        // channels: b2, b3, b4, b8, b12
        SitsCube::from_reflectance([1, 5, 1, 1], vec![b2, b3, 0.1, b8, b12], BandMap::default()).unwrap()
    }

    #[test]
    fn bright_pixel_is_cloudy() {
        // b3 chosen so that ndwi = 0.1: (b3 - 0.35) / (b3 + 0.35) = 0.1
        let b3 = 0.35 * 1.1 / 0.9;
        let p = CloudParams::default();
        assert!((p.ndwi(b3 as f32, 0.35) - 0.1).abs() < 1e-6);
        assert!(cloud_mask(&pixel_cube(0.25, b3 as f32, 0.35, 0.25), 0, &p).unwrap()[0]);
    }

    #[test]
    fn dark_pixel_is_clear() {
        let p = CloudParams::default();
        assert!(!cloud_mask(&pixel_cube(0.0, 0.0, 0.0, 0.0), 0, &p).unwrap()[0]);
    }

    #[test]
    fn water_exclusion() {
        let p = CloudParams::default();
        let cube = pixel_cube(0.25, 35.0, 0.35, 0.25);
        assert!(p.ndwi(35.0, 0.35) > 0.98);
        assert!(!cloud_mask(&cube, 0, &p).unwrap()[0]);
    }

    #[test]
    fn missing_band_is_config_error() {
        let map = BandMap::empty().with(Band::B2, 0);
        let cube = SitsCube::from_reflectance([1, 1, 1, 1], vec![0.0], map).unwrap();
        assert!(matches!(
            cloud_mask(&cube, 0, &CloudParams::default()),
            Err(crate::Error::Config(_))
        ));
        assert!(frame_quality(&cube, &CloudParams::default()).is_err());
    }

    #[test]
    fn score_formula() {
        assert!((frame_score(0.1, 0.5, 0.3) + 0.2).abs() < 1e-12);
    }

    #[test]
    fn clear_selection() {
        assert_eq!(select_clear_frames(&[0.9, 0.5, 0.79], 0.8), vec![1, 2]);
        assert_eq!(select_clear_frames(&[0.9, 0.95], 0.8), vec![0]);
        assert_eq!(select_clear_frames(&[0.0; 4], 0.8), vec![0, 1, 2, 3]);
        assert_eq!(select_clear_frames(&[0.8, 0.8], 0.8), vec![0]);
    }

    #[test]
    fn fully_cloudy_single_frame_falls_back() {
        let cube = pixel_cube(0.5, 0.4, 0.5, 0.5);
        let fq = frame_quality(&cube, &CloudParams::default()).unwrap();
        assert_eq!(fq.cloud_ratio, vec![1.0]);
        assert_eq!(fq.clear_set, vec![0]);
        assert_eq!(fq.best_frame, 0);
    }

    #[test]
    fn identical_frames_tie_to_lowest_index() {
        let frame: Vec<f32> = (0..5 * 16).map(|i| (i % 7) as f32 * 0.03).collect();
        let mut values = frame.clone();
        values.extend_from_slice(&frame);
        let cube = SitsCube::from_reflectance([2, 5, 4, 4], values, BandMap::default()).unwrap();
        let fq = frame_quality(&cube, &CloudParams::default()).unwrap();
        assert_eq!(fq.sharpness, vec![0.0, 0.0]);
        assert_eq!(fq.best_frame, 0);
    }

    #[test]
    fn flat_image_has_no_laplacian_energy() {
        assert_eq!(laplacian_variance(&[0.3; 12], 3, 4), 0.0);
        // single bright pixel in the middle of 3x3
        let mut img = [0.0f32; 9];
        img[4] = 1.0;
        // responses: centre -4, four edge neighbours +1, corners 0
        let mean = 0.0;
        let var = (16.0 + 4.0) / 9.0 - mean;
        assert!((laplacian_variance(&img, 3, 3) - var).abs() < 1e-12);
    }
}
