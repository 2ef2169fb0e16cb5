//! Linear per-pixel classifier trained on `CE + lambda * region loss`.
//!
//! Features are the per-channel temporal mean and population standard
//! deviation of the normalised cube (`F = 2C`). Training is full-batch
//! gradient descent with a backtracking (Armijo) step: the cross-entropy term
//! only sees labelled pixels, the region term sees every pixel.

use std::fmt::Write as _;

use crate::cube::SitsCube;
use crate::error::{ensure, Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::par::Exec;
use crate::region_loss::{
    pixel_ce_loss, pixel_ce_loss_grad, total_loss, LogitsCube, LossConfig, LossReport, RegionLayout, RegionLossPlan,
};
use crate::region_prior::RegionMap;
use crate::rng::SeededRng;

const UNLABELED: i32 = -1;

/// Pixel features `[F, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub dims: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Features {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, f: usize) -> &[f64] {
        let hw = self.pixels();
        &self.values[f * hw..(f + 1) * hw]
    }
}

pub fn featurize(cube: &SitsCube) -> Features {
    let [t, c, h, w] = cube.shape();
    let hw = h * w;
    let mut values = vec![0.0; 2 * c * hw];
    for ch in 0..c {
        let (means, stds) = values.split_at_mut(c * hw);
        let mean = &mut means[ch * hw..(ch + 1) * hw];
        let std = &mut stds[ch * hw..(ch + 1) * hw];
        for ti in 0..t {
            for (m, &v) in mean.iter_mut().zip(cube.plane(ti, ch)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        for ti in 0..t {
            for ((s, &v), &m) in std.iter_mut().zip(cube.plane(ti, ch)).zip(mean.iter()) {
                *s += (v as f64 - m).powi(2);
            }
        }
        std.iter_mut().for_each(|s| *s = (*s / t as f64).sqrt());
    }
    Features {
        dims: 2 * c,
        height: h,
        width: w,
        values,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub dims: usize,
    pub classes: usize,
    /// Row-major `[F, K]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ToyModel {
    /// Parameters drawn uniformly from `[-0.01, 0.01]`.
    pub fn init(dims: usize, classes: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let weights = (0..dims * classes).map(|_| rng.range(-0.01, 0.01)).collect();
        let bias = (0..classes).map(|_| rng.range(-0.01, 0.01)).collect();
        Self {
            dims,
            classes,
            weights,
            bias,
        }
    }

    pub fn zeros(dims: usize, classes: usize) -> Self {
        Self {
            dims,
            classes,
            weights: vec![0.0; dims * classes],
            bias: vec![0.0; classes],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Flattened view: weights then bias.
    pub fn parameters(&self) -> Vec<f64> {
        [self.weights.as_slice(), self.bias.as_slice()].concat()
    }

    pub fn set_parameters(&mut self, p: &[f64]) {
        let nw = self.weights.len();
        self.weights.copy_from_slice(&p[..nw]);
        self.bias.copy_from_slice(&p[nw..]);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: LogitsCube,
    /// Argmax class per pixel, lowest index on ties.
    pub classes: Vec<i32>,
}

pub fn predict(model: &ToyModel, features: &Features) -> Result<Prediction> {
    ensure!(
        model.dims == features.dims,
        Validation,
        "model expects {} features, got {}",
        model.dims,
        features.dims
    );
    let (k, hw) = (model.classes, features.pixels());
    let mut logits = vec![0.0; k * hw];
    for (class, plane) in logits.chunks_mut(hw).enumerate() {
        plane.iter_mut().for_each(|z| *z = model.bias[class]);
        for f in 0..model.dims {
            let wt = model.weights[f * k + class];
            for (z, &x) in plane.iter_mut().zip(features.plane(f)) {
                *z += wt * x;
            }
        }
    }
    let classes = (0..hw)
        .map(|j| {
            let mut best = 0;
            for class in 1..k {
                if logits[class * hw + j] > logits[best * hw + j] {
                    best = class;
                }
            }
            best as i32
        })
        .collect();
    Ok(Prediction {
        logits: LogitsCube::new([1, k, features.height, features.width], logits)?,
        classes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// `None` uses the region count of the prior.
    pub lambda: Option<f64>,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: None,
            lr: 2.0,
            epochs: 3000,
            seed: 42,
            loss: LossConfig::default(),
        }
    }
}

/// Everything one training run consumes.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub features: Features,
    /// Ground-truth class for every pixel.
    pub truth: Vec<i32>,
    pub classes: usize,
    pub regions: RegionMap,
    /// Pixels whose labels are visible to the cross-entropy term.
    pub labeled: Vec<usize>,
}

impl TrainData {
    pub fn validate(&self) -> Result<()> {
        let hw = self.features.pixels();
        ensure!(
            self.truth.len() == hw,
            Validation,
            "truth has {} pixels, features {}",
            self.truth.len(),
            hw
        );
        ensure!(
            !self.labeled.is_empty(),
            Validation,
            "at least one labelled pixel is required"
        );
        ensure!(
            self.labeled.iter().all(|&j| j < hw),
            Validation,
            "labelled pixel index out of range"
        );
        ensure!(self.classes >= 2, Validation, "need at least 2 classes");
        Ok(())
    }

    fn masked_labels(&self) -> Vec<i32> {
        let mut l = vec![UNLABELED; self.truth.len()];
        for &j in &self.labeled {
            l[j] = self.truth[j];
        }
        l
    }

    fn test_mask(&self) -> Vec<bool> {
        let mut m = vec![true; self.truth.len()];
        for &j in &self.labeled {
            m[j] = false;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub report: LossReport,
    pub train_miou: f64,
    pub test_miou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub lambda: f64,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn last(&self) -> &EpochRecord {
        self.history.last().expect("at least one epoch")
    }

    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,seg_loss,region_loss,total,train_miou,test_miou\n");
        for r in &self.history {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.epoch, r.report.seg_loss, r.report.region_loss, r.report.total, r.train_miou, r.test_miou
            )
            .unwrap();
        }
        s
    }
}

/// Objective value and gradient with respect to `[weights, bias]`.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub report: LossReport,
    pub grad: Vec<f64>,
    pub prediction: Prediction,
}

/// `CE(labelled) + lambda * region loss` over one scene, with the label mask
/// and region layout built once.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    data: &'a TrainData,
    lambda: f64,
    labels: Vec<i32>,
    layout: RegionLayout,
    exec: Exec,
}

impl<'a> Objective<'a> {
    pub fn new(data: &'a TrainData, lambda: f64, loss: LossConfig) -> Result<Self> {
        data.validate()?;
        ensure!(
            lambda >= 0.0 && lambda.is_finite(),
            Validation,
            "lambda must be finite and >= 0, got {}",
            lambda
        );
        let f = &data.features;
        let layout = RegionLayout::new(std::slice::from_ref(&data.regions), 1, f.height, f.width, loss)?;
        Ok(Self {
            data,
            lambda,
            labels: data.masked_labels(),
            layout,
            exec: Exec::default(),
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Objective value alone.
    pub fn value(&self, model: &ToyModel) -> Result<f64> {
        let pred = predict(model, &self.data.features)?;
        let seg = pixel_ce_loss(&pred.logits, &self.labels, Some(UNLABELED))?;
        let region = RegionLossPlan::new(&pred.logits, &self.layout, self.exec)?.loss_value();
        Ok(seg + self.lambda * region)
    }

    pub fn evaluate(&self, model: &ToyModel) -> Result<ObjectiveEval> {
        let pred = predict(model, &self.data.features)?;
        let (seg, seg_grad) = pixel_ce_loss_grad(&pred.logits, &self.labels, Some(UNLABELED))?;
        let plan = RegionLossPlan::new(&pred.logits, &self.layout, self.exec)?;
        let report = total_loss(seg, plan.loss_value(), self.lambda)?;
        let report = LossReport {
            regions_counted: plan.counted(),
            regions_skipped: plan.skipped(),
            ..report
        };
        let region_grad = plan.gradient(self.exec);

        let features = &self.data.features;
        let (k, hw) = (model.classes, features.pixels());
        let g_logits: Vec<f64> = seg_grad
            .iter()
            .zip(&region_grad)
            .map(|(a, b)| a + self.lambda * b)
            .collect();
        let mut grad = vec![0.0; model.parameter_count()];
        for class in 0..k {
            let g = &g_logits[class * hw..(class + 1) * hw];
            for f in 0..model.dims {
                grad[f * k + class] = g.iter().zip(features.plane(f)).map(|(a, b)| a * b).sum();
            }
            grad[model.weights.len() + class] = g.iter().sum();
        }
        Ok(ObjectiveEval {
            report,
            grad,
            prediction: pred,
        })
    }
}

/// One-off evaluation of the objective and its gradient.
pub fn objective(model: &ToyModel, data: &TrainData, lambda: f64, loss: LossConfig) -> Result<ObjectiveEval> {
    Objective::new(data, lambda, loss)?.evaluate(model)
}

fn miou_on(pred: &[i32], truth: &[i32], mask: &[bool], classes: usize) -> f64 {
    let (p, t): (Vec<i32>, Vec<i32>) = pred
        .iter()
        .zip(truth)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &t), _)| (p, t))
        .unzip();
    let mut cm = ConfusionMatrix::new(classes, None);
    cm.accumulate(&p, &t).expect("classes are in range");
    cm.miou().map(|r| r.miou).unwrap_or(0.0)
}

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 40;

/// Trains from a seeded initialisation. `history[e]` describes the model
/// after `e` updates, so it holds `epochs + 1` records.
pub fn train(data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    ensure!(
        cfg.lr > 0.0 && cfg.lr.is_finite(),
        Validation,
        "learning rate must be positive"
    );
    ensure!(cfg.epochs >= 1, Validation, "need at least one epoch");
    let lambda = cfg.lambda.unwrap_or(data.regions.region_count() as f64);
    let obj = Objective::new(data, lambda, cfg.loss)?;
    let mut model = ToyModel::init(data.features.dims, data.classes, cfg.seed);
    let test_mask = data.test_mask();
    let train_mask: Vec<bool> = test_mask.iter().map(|m| !m).collect();
    let has_test = test_mask.iter().any(|&m| m);

    let record = |epoch: usize, eval: &ObjectiveEval| EpochRecord {
        epoch,
        report: eval.report,
        train_miou: miou_on(&eval.prediction.classes, &data.truth, &train_mask, data.classes),
        test_miou: if has_test {
            miou_on(&eval.prediction.classes, &data.truth, &test_mask, data.classes)
        } else {
            f64::NAN
        },
    };
    let check = |epoch: usize, eval: &ObjectiveEval| {
        if !eval.report.total.is_finite() || eval.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                epoch,
                detail: format!("non-finite objective {}", eval.report.total),
            });
        }
        Ok(())
    };

    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let mut eval = obj.evaluate(&model)?;
    for epoch in 0..cfg.epochs {
        check(epoch, &eval)?;
        history.push(record(epoch, &eval));
        let params = model.parameters();
        let g2: f64 = eval.grad.iter().map(|g| g * g).sum();
        let mut step = cfg.lr;
        let mut candidate = model.clone();
        let mut trial = None;
        for _ in 0..MAX_HALVINGS {
            let next: Vec<f64> = params.iter().zip(&eval.grad).map(|(p, g)| p - step * g).collect();
            candidate.set_parameters(&next);
            let e = obj.evaluate(&candidate)?;
            if e.report.total.is_finite() && e.report.total <= eval.report.total - ARMIJO_C * step * g2 {
                trial = Some(e);
                break;
            }
            step *= 0.5;
        }
        model = candidate;
        eval = match trial {
            Some(e) => e,
            None => obj.evaluate(&model)?,
        };
    }
    check(cfg.epochs, &eval)?;
    history.push(record(cfg.epochs, &eval));
    Ok(TrainOutcome { model, lambda, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cube::BandMap;

    #[test]
    fn featurize_shapes_and_single_frame() {
        let cube =
            SitsCube::from_reflectance([1, 3, 2, 2], (0..12).map(|v| v as f32).collect(), BandMap::empty()).unwrap();
        let f = featurize(&cube);
        assert_eq!(f.dims, 6);
        assert_eq!(f.plane(0), &[0.0, 1.0, 2.0, 3.0]);
        assert!(f.values[3 * 4..].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn constant_in_time_pixel() {
        let cube = SitsCube::from_reflectance([3, 1, 1, 1], vec![0.25; 3], BandMap::empty()).unwrap();
        let f = featurize(&cube);
        assert_eq!(f.values, vec![0.25, 0.0]);
    }

    #[test]
    fn zero_model_predicts_class_zero() {
        let features = Features {
            dims: 2,
            height: 2,
            width: 3,
            values: (0..12).map(|v| v as f64).collect(),
        };
        let p = predict(&ToyModel::zeros(2, 4), &features).unwrap();
        assert_eq!(p.logits.shape(), [1, 4, 2, 3]);
        assert!(p.classes.iter().all(|&c| c == 0));
        assert!(predict(&ToyModel::zeros(3, 4), &features).is_err());
    }

    #[test]
    fn one_hot_feature_selects_class() {
        let features = Features {
            dims: 3,
            height: 1,
            width: 3,
            // pixel j has feature j set
            values: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        };
        let mut m = ToyModel::zeros(3, 3);
        for f in 0..3 {
            m.weights[f * 3 + (2 - f)] = 1.0;
        }
        assert_eq!(predict(&m, &features).unwrap().classes, vec![2, 1, 0]);
    }

    #[test]
    fn init_is_seeded_and_small() {
        let a = ToyModel::init(4, 3, 9);
        assert_eq!(a, ToyModel::init(4, 3, 9));
        assert!(a.parameters().iter().all(|p| p.abs() <= 0.01));
    }
}
