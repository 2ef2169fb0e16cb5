//! Confusion-matrix segmentation metrics: per-class IoU, mIoU and overall accuracy.
//!
//! Classes whose IoU denominator is zero (absent from both truth and
//! prediction) are left out of the mIoU mean rather than counted as 0.

use std::fmt::Write as _;

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    ignore: Option<i32>,
    /// Row-major `[truth][prediction]`.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, ignore: Option<i32>) -> Self {
        assert!(classes >= 1, "need at least one class");
        Self {
            classes,
            ignore,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        ensure!(
            counts.len() == classes * classes,
            Validation,
            "{} counts for {} classes",
            counts.len(),
            classes
        );
        Ok(Self {
            classes,
            ignore: None,
            counts,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    /// Adds one `(prediction, truth)` image pair. Validation happens before
    /// any count changes.
    pub fn accumulate(&mut self, pred: &[i32], truth: &[i32]) -> Result<()> {
        ensure!(
            pred.len() == truth.len(),
            Validation,
            "prediction has {} pixels, truth has {}",
            pred.len(),
            truth.len()
        );
        let k = self.classes as i32;
        let in_range = |v: i32| (0..k).contains(&v);
        for (&p, &t) in pred.iter().zip(truth) {
            if Some(t) == self.ignore {
                continue;
            }
            ensure!(in_range(t), Validation, "truth class {} outside 0..{}", t, k);
            ensure!(in_range(p), Validation, "predicted class {} outside 0..{}", p, k);
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if Some(t) == self.ignore {
                continue;
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Element-wise sum with a matrix accumulated elsewhere.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        ensure!(
            other.classes == self.classes,
            Validation,
            "cannot merge {}-class and {}-class matrices",
            self.classes,
            other.classes
        );
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn miou(&self) -> Result<MiouReport> {
        self.ensure_nonempty()?;
        let k = self.classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| self.get(c, p)).sum();
                let fp: u64 = (0..k).filter(|&t| t != c).map(|t| self.get(t, c)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().cloned().collect();
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        Ok(MiouReport { per_class, miou })
    }

    pub fn overall_accuracy(&self) -> Result<f64> {
        self.ensure_nonempty()?;
        Ok(self.trace() as f64 / self.total() as f64)
    }

    fn ensure_nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::UndefinedMetric("no evaluated pixels".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    /// `None` for classes absent from both truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Convenience wrapper: accumulate one pair and report `(mIoU report, OA)`.
pub fn evaluate(pred: &[i32], truth: &[i32], classes: usize, ignore: Option<i32>) -> Result<(MiouReport, f64)> {
    let mut cm = ConfusionMatrix::new(classes, ignore);
    cm.accumulate(pred, truth)?;
    Ok((cm.miou()?, cm.overall_accuracy()?))
}

/// `key=value` report with one `iou_<k>` line per class.
pub fn metrics_text(report: &MiouReport, oa: f64, cm: &ConfusionMatrix) -> String {
    let mut s = String::new();
    writeln!(s, "classes={}", cm.classes()).unwrap();
    writeln!(s, "pixels={}", cm.total()).unwrap();
    writeln!(s, "miou={}", report.miou).unwrap();
    writeln!(s, "oa={oa}").unwrap();
    for (k, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => writeln!(s, "iou_{k}={v}").unwrap(),
            None => writeln!(s, "iou_{k}=nan").unwrap(),
        }
    }
    s
}

pub fn metrics_csv(report: &MiouReport) -> String {
    let mut s = String::from("class,iou\n");
    for (k, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => writeln!(s, "{k},{v}").unwrap(),
            None => writeln!(s, "{k},").unwrap(),
        }
    }
    s
}
