//! The satellite image time series cube `[T, C, H, W]` and its band mapping.

use std::fmt;
use std::str::FromStr;

use crate::error::{ensure, Error, Result};

/// Upper bound of raw Sentinel-2 digital numbers before scaling.
pub const RAW_MAX: f32 = 65535.0;
pub const DEFAULT_REFLECTANCE_SCALE: f32 = 10000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Band {
    B2,
    B3,
    B4,
    B8,
    B12,
}

impl Band {
    pub const ALL: [Band; 5] = [Band::B2, Band::B3, Band::B4, Band::B8, Band::B12];

    pub fn name(self) -> &'static str {
        match self {
            Band::B2 => "b2",
            Band::B3 => "b3",
            Band::B4 => "b4",
            Band::B8 => "b8",
            Band::B12 => "b12",
        }
    }
}

/// Semantic band name to channel index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BandMap {
    slots: [Option<usize>; 5],
}

impl Default for BandMap {
    /// Compact layout `b2=0,b3=1,b4=2,b8=3,b12=4` used by the synthetic generator.
    fn default() -> Self {
        Self {
            slots: [Some(0), Some(1), Some(2), Some(3), Some(4)],
        }
    }
}

impl BandMap {
    pub fn empty() -> Self {
        Self { slots: [None; 5] }
    }

    /// Ten-band PASTIS ordering B2,B3,B4,B5,B6,B7,B8,B8A,B11,B12.
    pub fn pastis() -> Self {
        Self {
            slots: [Some(0), Some(1), Some(2), Some(6), Some(9)],
        }
    }

    pub fn with(mut self, band: Band, channel: usize) -> Self {
        self.slots[slot(band)] = Some(channel);
        self
    }

    pub fn get(&self, band: Band) -> Option<usize> {
        self.slots[slot(band)]
    }

    pub fn index(&self, band: Band) -> Result<usize> {
        self.get(band)
            .ok_or_else(|| Error::Config(format!("band map has no entry for {}", band.name())))
    }

    fn check_channels(&self, c: usize) -> Result<()> {
        for band in Band::ALL {
            if let Some(i) = self.get(band) {
                ensure!(
                    i < c,
                    Config,
                    "band {} mapped to channel {} but the cube has {} channels",
                    band.name(),
                    i,
                    c
                );
            }
        }
        Ok(())
    }
}

fn slot(band: Band) -> usize {
    match band {
        Band::B2 => 0,
        Band::B3 => 1,
        Band::B4 => 2,
        Band::B8 => 3,
        Band::B12 => 4,
    }
}

impl FromStr for BandMap {
    type Err = Error;

    /// Accepts `pastis`, `compact`, or a list such as `b2=0,b3=1,b4=2,b8=6,b12=9`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "pastis" => return Ok(Self::pastis()),
            "compact" | "default" => return Ok(Self::default()),
            _ => {}
        }
        let mut map = Self::empty();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("band map entry '{part}' is not key=value")))?;
            let band = Band::ALL
                .into_iter()
                .find(|b| b.name().eq_ignore_ascii_case(k.trim()))
                .ok_or_else(|| Error::Config(format!("unknown band '{}'", k.trim())))?;
            let idx = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("band index '{}' is not an integer", v.trim())))?;
            map = map.with(band, idx);
        }
        Ok(map)
    }
}

impl fmt::Display for BandMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = Band::ALL
            .into_iter()
            .filter_map(|b| self.get(b).map(|i| format!("{}={}", b.name(), i)))
            .collect();
        f.write_str(&parts.join(","))
    }
}

/// Time series of multispectral frames stored as reflectance, row-major `[T, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SitsCube {
    t: usize,
    c: usize,
    h: usize,
    w: usize,
    values: Vec<f32>,
    band_map: BandMap,
    reflectance_scale: f32,
}

impl SitsCube {
    /// Builds a cube from raw digital numbers: clip to `[0, 65535]`, then
    /// divide by `scale`.
    pub fn from_raw(shape: [usize; 4], raw: &[f32], band_map: BandMap, scale: f32) -> Result<Self> {
        ensure!(
            scale.is_finite() && scale > 0.0,
            Config,
            "reflectance scale must be positive, got {}",
            scale
        );
        ensure!(raw.iter().all(|v| !v.is_nan()), Validation, "raw cube contains NaN");
        let s = scale as f64;
        let values = raw.iter().map(|&v| (v.clamp(0.0, RAW_MAX) as f64 / s) as f32).collect();
        Self::build(shape, values, band_map, scale)
    }

    /// Builds a cube from values that are already reflectance.
    pub fn from_reflectance(shape: [usize; 4], values: Vec<f32>, band_map: BandMap) -> Result<Self> {
        ensure!(
            values.iter().all(|v| v.is_finite()),
            Validation,
            "cube contains non-finite values"
        );
        Self::build(shape, values, band_map, DEFAULT_REFLECTANCE_SCALE)
    }

    fn build(shape: [usize; 4], values: Vec<f32>, band_map: BandMap, scale: f32) -> Result<Self> {
        let [t, c, h, w] = shape;
        ensure!(
            t >= 1 && c >= 1 && h >= 1 && w >= 1,
            Validation,
            "cube extents must be at least 1, got {:?}",
            shape
        );
        ensure!(
            values.len() == t * c * h * w,
            Validation,
            "cube shape {:?} needs {} values, got {}",
            shape,
            t * c * h * w,
            values.len()
        );
        band_map.check_channels(c)?;
        Ok(Self {
            t,
            c,
            h,
            w,
            values,
            band_map,
            reflectance_scale: scale,
        })
    }

    /// Same band map and scale, new values and extents.
    pub fn with_values(&self, shape: [usize; 4], values: Vec<f32>) -> Result<Self> {
        Self::build(shape, values, self.band_map, self.reflectance_scale)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.t, self.c, self.h, self.w]
    }

    pub fn frames(&self) -> usize {
        self.t
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn band_map(&self) -> &BandMap {
        &self.band_map
    }

    pub fn reflectance_scale(&self) -> f32 {
        self.reflectance_scale
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.c * self.h * self.w;
        &self.values[t * n..(t + 1) * n]
    }

    pub fn plane(&self, t: usize, c: usize) -> &[f32] {
        let hw = self.h * self.w;
        let off = (t * self.c + c) * hw;
        &self.values[off..off + hw]
    }

    pub fn band(&self, t: usize, band: Band) -> Result<&[f32]> {
        Ok(self.plane(t, self.band_map.index(band)?))
    }

    /// Reflectance multiplied back to digital numbers (no rounding).
    pub fn to_raw(&self) -> Vec<f32> {
        let s = self.reflectance_scale as f64;
        self.values.iter().map(|&v| (v as f64 * s) as f32).collect()
    }

    /// Keeps the listed frames, in the given order.
    pub fn select_frames(&self, frames: &[usize]) -> Result<Self> {
        ensure!(!frames.is_empty(), Validation, "frame list is empty");
        let mut values = Vec::with_capacity(frames.len() * self.c * self.pixels());
        for &f in frames {
            ensure!(f < self.t, Validation, "frame {} out of range 0..{}", f, self.t);
            values.extend_from_slice(self.frame(f));
        }
        self.with_values([frames.len(), self.c, self.h, self.w], values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_map_parsing() {
        let m: BandMap = "b2=1, b3=2,b4=3,b8=7,B12=9".parse().unwrap();
        assert_eq!(m.get(Band::B12), Some(9));
        assert_eq!(m.to_string(), "b2=1,b3=2,b4=3,b8=7,b12=9");
        assert_eq!("pastis".parse::<BandMap>().unwrap(), BandMap::pastis());
        assert!("b9=1".parse::<BandMap>().is_err());
        assert!(matches!(BandMap::empty().index(Band::B8), Err(Error::Config(_))));
    }

    #[test]
    fn raw_values_are_clipped_then_scaled() {
        let cube = SitsCube::from_raw(
            [1, 5, 1, 2],
            &[-5.0, 70000.0, 2000.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            BandMap::default(),
            10000.0,
        )
        .unwrap();
        assert_eq!(cube.plane(0, 0), &[0.0, 6.5535]);
        assert_eq!(cube.plane(0, 1), &[0.2, 0.0]);
    }

    #[test]
    fn band_index_beyond_channels_rejected() {
        let err = SitsCube::from_reflectance([1, 3, 1, 1], vec![0.0; 3], BandMap::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
