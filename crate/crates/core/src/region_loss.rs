//! Region-variance consistency loss and its analytic gradient.
//!
//! For every item `b` and region `u` with `n_u >= 2` pixels, the per-class
//! variance of `sigmoid(logits)` over the region's pixels is averaged over
//! the `K` classes; the loss is the mean of those values over the `N`
//! counted `(item, region)` pairs, and exactly zero when `N = 0`.
//!
//! The gradient with respect to logit `z_{b,k,j}` for pixel `j` in counted
//! region `u` is
//!
//! ```text
//! 1 / (N K) * 2 / (n_u - 1) * (p_j - mean_u,k) * p_j (1 - p_j)
//! ```
//!
//! (divisor `n_u` instead of `n_u - 1` for population variance) and zero for
//! pixels of skipped regions.

use std::fmt;

use crate::error::{ensure, Error, Result};
use crate::par::Exec;
use crate::region_prior::{region_index_labels, resize_nearest, RegionMap, RegionPixels, BACKGROUND};
use crate::tensor_io::TensorContainer;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    // exp(-|z|) never overflows; selecting the numerator keeps this branch-free
    let e = (-z.abs()).exp();
    let num = if z >= 0.0 { 1.0 } else { e };
    num / (1.0 + e)
}

/// Raw per-class predictions `[B, K, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsCube {
    pub batch: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub logits: Vec<f64>,
}

impl LogitsCube {
    pub fn new(shape: [usize; 4], logits: Vec<f64>) -> Result<Self> {
        let [b, k, h, w] = shape;
        ensure!(
            b >= 1 && k >= 1 && h >= 1 && w >= 1,
            Validation,
            "logits extents must be at least 1, got {:?}",
            shape
        );
        ensure!(
            logits.len() == b * k * h * w,
            Validation,
            "logits shape {:?} needs {} values, got {}",
            shape,
            b * k * h * w,
            logits.len()
        );
        Ok(Self {
            batch: b,
            classes: k,
            height: h,
            width: w,
            logits,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.classes, self.height, self.width]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logits.iter().map(|&z| sigmoid(z)).collect()
    }

    #[inline]
    pub fn index(&self, b: usize, k: usize, pixel: usize) -> usize {
        (b * self.classes + k) * self.pixels() + pixel
    }

    pub fn from_tensor(t: &TensorContainer) -> Result<Self> {
        let shape: [usize; 4] = t
            .shape()
            .try_into()
            .map_err(|_| Error::Validation(format!("logits must be [B, K, H, W], got {:?}", t.shape())))?;
        Self::new(shape, t.to_f32_vec().into_iter().map(f64::from).collect())
    }

    pub fn to_tensor(&self) -> TensorContainer {
        TensorContainer::f32(self.shape().to_vec(), self.logits.iter().map(|&v| v as f32).collect())
            .expect("validated at construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceMode {
    /// Divisor `n - 1`.
    #[default]
    Unbiased,
    /// Divisor `n`.
    Population,
}

impl std::str::FromStr for VarianceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unbiased" => Ok(VarianceMode::Unbiased),
            "population" => Ok(VarianceMode::Population),
            other => Err(Error::Config(format!(
                "unknown variance mode {other:?} (unbiased, population)"
            ))),
        }
    }
}

impl std::fmt::Display for VarianceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VarianceMode::Unbiased => "unbiased",
            VarianceMode::Population => "population",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LossConfig {
    pub variance: VarianceMode,
    /// Leave pixels with id 0 out of every region.
    pub exclude_background: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionVariance {
    pub item: usize,
    pub id: i32,
    pub pixels: usize,
    /// One variance per class.
    pub variances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionLoss {
    pub loss: f64,
    pub per_region: Vec<RegionVariance>,
    pub counted: usize,
    pub skipped: usize,
}

/// Counted `(item, region)` pairs and the pixel-to-pair lookup. Depends only
/// on the region maps, the prediction extent and the configuration, so one
/// layout serves every evaluation during training.
#[derive(Debug, Clone)]
pub struct RegionLayout {
    batch: usize,
    height: usize,
    width: usize,
    config: LossConfig,
    maps: Vec<Vec<RegionPixels>>,
    /// `(item, map, region)` per counted pair, ascending `(item, id)`.
    units: Vec<(usize, usize, usize)>,
    /// Per item and pixel: index into `units`, or `NOT_COUNTED`.
    unit_of_pixel: Vec<u32>,
    skipped: usize,
}

const NOT_COUNTED: u32 = u32::MAX;

impl RegionLayout {
    /// One map is broadcast over the batch; otherwise one map per item.
    /// Maps whose extent differs from `height x width` are resampled with
    /// nearest-neighbour interpolation.
    pub fn new(regions: &[RegionMap], batch: usize, height: usize, width: usize, config: LossConfig) -> Result<Self> {
        ensure!(
            regions.len() == 1 || regions.len() == batch,
            Validation,
            "{} region maps for a batch of {} (expected 1 or {})",
            regions.len(),
            batch,
            batch
        );
        let maps: Vec<Vec<RegionPixels>> = regions
            .iter()
            .map(|m| {
                if m.height() == height && m.width() == width {
                    Ok(region_index_labels(m.labels()))
                } else {
                    Ok(region_index_labels(resize_nearest(m, height, width)?.labels()))
                }
            })
            .collect::<Result<_>>()?;

        let hw = height * width;
        let mut units = Vec::new();
        let mut skipped = 0;
        let mut unit_of_pixel = vec![NOT_COUNTED; batch * hw];
        for item in 0..batch {
            let map = if maps.len() == 1 { 0 } else { item };
            for (r, region) in maps[map].iter().enumerate() {
                if config.exclude_background && region.id == BACKGROUND {
                    continue;
                }
                if region.skippable {
                    skipped += 1;
                    continue;
                }
                for &j in &region.pixels {
                    unit_of_pixel[item * hw + j as usize] = units.len() as u32;
                }
                units.push((item, map, r));
            }
        }
        Ok(Self {
            batch,
            height,
            width,
            config,
            maps,
            units,
            unit_of_pixel,
            skipped,
        })
    }

    pub fn counted(&self) -> usize {
        self.units.len()
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    fn region(&self, unit: usize) -> (usize, &RegionPixels) {
        let (item, map, r) = self.units[unit];
        (item, &self.maps[map][r])
    }

    fn divisor(&self, n: usize) -> f64 {
        match self.config.variance {
            VarianceMode::Unbiased => n as f64 - 1.0,
            VarianceMode::Population => n as f64,
        }
    }

    fn check(&self, pred: &LogitsCube) -> Result<()> {
        ensure!(
            pred.batch == self.batch && pred.height == self.height && pred.width == self.width,
            Validation,
            "logits {:?} do not match region layout [{}, _, {}, {}]",
            pred.shape(),
            self.batch,
            self.height,
            self.width
        );
        Ok(())
    }
}

/// Sigmoid probabilities and per-region class statistics for one set of logits.
#[derive(Debug, Clone)]
pub struct RegionLossPlan<'a> {
    layout: &'a RegionLayout,
    classes: usize,
    probs: Vec<f64>,
    /// `[unit][class]`
    means: Vec<f64>,
    variances: Vec<f64>,
}

impl<'a> RegionLossPlan<'a> {
    pub fn new(pred: &LogitsCube, layout: &'a RegionLayout, exec: Exec) -> Result<Self> {
        layout.check(pred)?;
        let k = pred.classes;
        let hw = pred.pixels();
        let probs = exec.map_slice(&pred.logits, |&z| sigmoid(z));
        let probs_ref = &probs;
        let stats = exec.map_range(layout.counted(), |u| {
            let (item, region) = layout.region(u);
            let n = region.pixels.len() as f64;
            let divisor = layout.divisor(region.pixels.len());
            let mut out = Vec::with_capacity(2 * k);
            for class in 0..k {
                let plane = &probs_ref[(item * k + class) * hw..(item * k + class + 1) * hw];
                let mean = region.pixels.iter().map(|&j| plane[j as usize]).sum::<f64>() / n;
                let ss: f64 = region
                    .pixels
                    .iter()
                    .map(|&j| {
                        let d = plane[j as usize] - mean;
                        d * d
                    })
                    .sum();
                out.push(mean);
                out.push(ss / divisor);
            }
            out
        });
        let mut means = Vec::with_capacity(stats.len() * k);
        let mut variances = Vec::with_capacity(stats.len() * k);
        for s in stats {
            for pair in s.chunks_exact(2) {
                means.push(pair[0]);
                variances.push(pair[1]);
            }
        }
        Ok(Self {
            layout,
            classes: k,
            probs,
            means,
            variances,
        })
    }

    pub fn counted(&self) -> usize {
        self.layout.counted()
    }

    pub fn skipped(&self) -> usize {
        self.layout.skipped()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Loss value alone; accumulation runs in ascending `(item, id)` order.
    pub fn loss_value(&self) -> f64 {
        let n = self.counted();
        if n == 0 {
            return 0.0;
        }
        let k = self.classes as f64;
        let sum: f64 = self
            .variances
            .chunks_exact(self.classes)
            .map(|v| v.iter().sum::<f64>() / k)
            .sum();
        sum / n as f64
    }

    /// Loss with per-region variances.
    pub fn loss(&self) -> RegionLoss {
        let per_region = (0..self.counted())
            .map(|u| {
                let (item, region) = self.layout.region(u);
                RegionVariance {
                    item,
                    id: region.id,
                    pixels: region.pixels.len(),
                    variances: self.variances[u * self.classes..(u + 1) * self.classes].to_vec(),
                }
            })
            .collect();
        RegionLoss {
            loss: self.loss_value(),
            per_region,
            counted: self.counted(),
            skipped: self.skipped(),
        }
    }

    /// Gradient of the loss with respect to the logits, laid out `[B, K, H, W]`.
    pub fn gradient(&self, exec: Exec) -> Vec<f64> {
        let k = self.classes;
        let hw = self.layout.height * self.layout.width;
        let mut grad = vec![0.0; self.probs.len()];
        let n_units = self.counted();
        if n_units == 0 {
            return grad;
        }
        let scale = 1.0 / (n_units as f64 * k as f64);
        let layout = self.layout;
        let coef: Vec<f64> = (0..n_units)
            .map(|u| scale * (2.0 / layout.divisor(layout.region(u).1.pixels.len())))
            .collect();
        exec.for_each_chunk_mut(&mut grad, hw, |plane_idx, plane| {
            let item = plane_idx / k;
            let class = plane_idx % k;
            let probs = &self.probs[plane_idx * hw..(plane_idx + 1) * hw];
            let lookup = &layout.unit_of_pixel[item * hw..(item + 1) * hw];
            for j in 0..hw {
                let u = lookup[j];
                if u == NOT_COUNTED {
                    continue;
                }
                let u = u as usize;
                let p = probs[j];
                let dev = p - self.means[u * k + class];
                plane[j] = coef[u] * dev * p * (1.0 - p);
            }
        });
        grad
    }

    /// Deviations `p_j - mean` of each counted region, one vector per class.
    pub fn deviations(&self) -> Vec<(usize, i32, Vec<Vec<f64>>)> {
        let k = self.classes;
        let hw = self.layout.height * self.layout.width;
        (0..self.counted())
            .map(|u| {
                let (item, region) = self.layout.region(u);
                let per_class = (0..k)
                    .map(|class| {
                        let plane = &self.probs[(item * k + class) * hw..];
                        region
                            .pixels
                            .iter()
                            .map(|&j| plane[j as usize] - self.means[u * k + class])
                            .collect()
                    })
                    .collect();
                (item, region.id, per_class)
            })
            .collect()
    }
}

/// Configured loss evaluator.
#[derive(Debug, Clone, Copy, Default)]
pub struct RegionSmoothLoss {
    pub config: LossConfig,
    pub exec: Exec,
}

impl RegionSmoothLoss {
    pub fn new(config: LossConfig) -> Self {
        Self {
            config,
            exec: Exec::default(),
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn layout(&self, pred: &LogitsCube, regions: &[RegionMap]) -> Result<RegionLayout> {
        RegionLayout::new(regions, pred.batch, pred.height, pred.width, self.config)
    }

    pub fn forward(&self, pred: &LogitsCube, regions: &[RegionMap]) -> Result<RegionLoss> {
        let layout = self.layout(pred, regions)?;
        Ok(RegionLossPlan::new(pred, &layout, self.exec)?.loss())
    }

    pub fn gradient(&self, pred: &LogitsCube, regions: &[RegionMap]) -> Result<Vec<f64>> {
        let layout = self.layout(pred, regions)?;
        Ok(RegionLossPlan::new(pred, &layout, self.exec)?.gradient(self.exec))
    }

    pub fn forward_backward(&self, pred: &LogitsCube, regions: &[RegionMap]) -> Result<(RegionLoss, Vec<f64>)> {
        let layout = self.layout(pred, regions)?;
        let plan = RegionLossPlan::new(pred, &layout, self.exec)?;
        Ok((plan.loss(), plan.gradient(self.exec)))
    }

    /// Evaluates against a prebuilt layout (the layout's config applies).
    pub fn plan<'a>(&self, pred: &LogitsCube, layout: &'a RegionLayout) -> Result<RegionLossPlan<'a>> {
        RegionLossPlan::new(pred, layout, self.exec)
    }
}

/// Loss with the default configuration; one map is broadcast over the batch.
pub fn region_smooth_loss(pred: &LogitsCube, regions: &[RegionMap]) -> Result<RegionLoss> {
    RegionSmoothLoss::default().forward(pred, regions)
}

pub fn region_smooth_loss_grad(pred: &LogitsCube, regions: &[RegionMap]) -> Result<Vec<f64>> {
    RegionSmoothLoss::default().gradient(pred, regions)
}

/// Decomposition of the combined objective `seg + lambda * region`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub seg_loss: f64,
    pub region_loss: f64,
    pub lambda: f64,
    pub total: f64,
    pub regions_counted: usize,
    pub regions_skipped: usize,
}

impl LossReport {
    pub fn with_counts(mut self, region: &RegionLoss) -> Self {
        self.regions_counted = region.counted;
        self.regions_skipped = region.skipped;
        self
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seg_loss={}", self.seg_loss)?;
        writeln!(f, "region_loss={}", self.region_loss)?;
        writeln!(f, "lambda={}", self.lambda)?;
        writeln!(f, "total={}", self.total)?;
        writeln!(f, "regions_counted={}", self.regions_counted)?;
        writeln!(f, "regions_skipped={}", self.regions_skipped)
    }
}

pub fn total_loss(seg: f64, region: f64, lambda: f64) -> Result<LossReport> {
    ensure!(
        lambda >= 0.0 && lambda.is_finite(),
        Validation,
        "lambda must be finite and nonnegative, got {}",
        lambda
    );
    Ok(LossReport {
        seg_loss: seg,
        region_loss: region,
        lambda,
        total: seg + lambda * region,
        regions_counted: 0,
        regions_skipped: 0,
    })
}

/// Mean softmax cross-entropy over non-ignored pixels; `labels` is `[B, H, W]`.
pub fn pixel_ce_loss(pred: &LogitsCube, labels: &[i32], ignore: Option<i32>) -> Result<f64> {
    Ok(pixel_ce(pred, labels, ignore, false)?.0)
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn pixel_ce_loss_grad(pred: &LogitsCube, labels: &[i32], ignore: Option<i32>) -> Result<(f64, Vec<f64>)> {
    let (loss, grad) = pixel_ce(pred, labels, ignore, true)?;
    Ok((loss, grad.unwrap_or_default()))
}

fn pixel_ce(
    pred: &LogitsCube,
    labels: &[i32],
    ignore: Option<i32>,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let [b, k, h, w] = pred.shape();
    let hw = h * w;
    ensure!(
        labels.len() == b * hw,
        Validation,
        "labels have {} entries, expected {} ([B, H, W] = [{}, {}, {}])",
        labels.len(),
        b * hw,
        b,
        h,
        w
    );
    for &l in labels {
        ensure!(
            Some(l) == ignore || (0..k as i32).contains(&l),
            Validation,
            "label {} outside 0..{}",
            l,
            k
        );
    }
    let valid = labels.iter().filter(|&&l| Some(l) != ignore).count();
    let mut grad = want_grad.then(|| vec![0.0; pred.logits.len()]);
    if valid == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / valid as f64;
    let mut total = 0.0;
    let mut z = vec![0.0; k];
    for item in 0..b {
        for j in 0..hw {
            let label = labels[item * hw + j];
            if Some(label) == ignore {
                continue;
            }
            for (c, zc) in z.iter_mut().enumerate() {
                *zc = pred.logits[pred.index(item, c, j)];
            }
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = z.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + sum_exp.ln();
            total += lse - z[label as usize];
            if let Some(g) = grad.as_mut() {
                for c in 0..k {
                    let p = (z[c] - lse).exp();
                    let target = if c as i32 == label { 1.0 } else { 0.0 };
                    g[pred.index(item, c, j)] = (p - target) * inv;
                }
            }
        }
    }
    Ok((total * inv, grad))
}
