//! Reference implementations and fixtures shared by the integration tests.
//!
//! The oracles are written from the definitions, as plainly as possible, and
//! never call the library routine they are compared against.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use std::process::{Command, Output};

use sitskit::SeededRng;

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Region loss by explicit loops over items, regions and classes.
/// `maps` holds one `[H, W]` label image or one per item. Returns
/// `(loss, counted, skipped)`.
pub fn naive_region_loss(shape: [usize; 4], logits: &[f64], maps: &[Vec<i32>], unbiased: bool) -> (f64, usize, usize) {
    naive_region_loss_with(shape, logits, maps, unbiased, false)
}

/// As [`naive_region_loss`]; with `exclude_zero` pixels labelled 0 belong to no region.
pub fn naive_region_loss_with(
    shape: [usize; 4],
    logits: &[f64],
    maps: &[Vec<i32>],
    unbiased: bool,
    exclude_zero: bool,
) -> (f64, usize, usize) {
    let [b, k, h, w] = shape;
    let hw = h * w;
    let mut sum = 0.0;
    let (mut counted, mut skipped) = (0, 0);
    for item in 0..b {
        let map = if maps.len() == 1 { &maps[0] } else { &maps[item] };
        let ids: BTreeSet<i32> = map.iter().cloned().filter(|&id| !(exclude_zero && id == 0)).collect();
        for id in ids {
            let members: Vec<usize> = (0..hw).filter(|&p| map[p] == id).collect();
            let n = members.len();
            if n < 2 {
                skipped += 1;
                continue;
            }
            counted += 1;
            let mut per_class = 0.0;
            for c in 0..k {
                let probs: Vec<f64> = members
                    .iter()
                    .map(|&p| sigmoid(logits[(item * k + c) * hw + p]))
                    .collect();
                let mean = probs.iter().sum::<f64>() / n as f64;
                let ss: f64 = probs.iter().map(|p| (p - mean) * (p - mean)).sum();
                per_class += ss / if unbiased { (n - 1) as f64 } else { n as f64 };
            }
            sum += per_class / k as f64;
        }
    }
    let loss = if counted == 0 { 0.0 } else { sum / counted as f64 };
    (loss, counted, skipped)
}

/// Label image with ids drawn from a random set of `q` values; regions are
/// generally not connected and some may be single pixels.
pub fn random_labels(rng: &mut SeededRng, h: usize, w: usize, q: usize) -> Vec<i32> {
    let ids: Vec<i32> = (0..q).map(|_| rng.below(1000) as i32 - 100).collect();
    (0..h * w).map(|_| ids[rng.below(q)]).collect()
}

pub fn random_logits(rng: &mut SeededRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.range(-scale, scale)).collect()
}

/// Direct evaluation of the four-term cloud test in f64.
pub fn cloudy(b2: f32, b3: f32, b8: f32, b12: f32) -> bool {
    let (b2, b3, b8, b12) = (b2 as f64, b3 as f64, b8 as f64, b12 as f64);
    let ndwi = (b3 - b8) / (b3 + b8 + 1e-8);
    b2 > 0.2 && b8 > 0.3 && b12 > 0.2 && ndwi < 0.9
}

/// Per-class IoU (None when the class is in neither set), mIoU and OA, from
/// pixel index sets.
pub fn set_metrics(pred: &[i32], truth: &[i32], classes: usize, ignore: Option<i32>) -> (Vec<Option<f64>>, f64, f64) {
    let valid: Vec<usize> = (0..truth.len()).filter(|&i| Some(truth[i]) != ignore).collect();
    let per_class: Vec<Option<f64>> = (0..classes as i32)
        .map(|c| {
            let t: HashSet<usize> = valid.iter().cloned().filter(|&i| truth[i] == c).collect();
            let p: HashSet<usize> = valid.iter().cloned().filter(|&i| pred[i] == c).collect();
            let union = t.union(&p).count();
            (union > 0).then(|| t.intersection(&p).count() as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().cloned().collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    let correct = valid.iter().filter(|&&i| pred[i] == truth[i]).count();
    (per_class, miou, correct as f64 / valid.len() as f64)
}

/// Paint by descending area (stack order on ties), then renumber the
/// surviving masks 1..R keeping their paint order.
pub fn paint_oracle(masks: &[Vec<bool>], n: usize) -> Vec<i32> {
    let area = |m: &Vec<bool>| m.iter().filter(|&&b| b).count();
    let mut order: Vec<usize> = (0..masks.len()).filter(|&i| area(&masks[i]) > 0).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(area(&masks[i])), i));
    let mut owner = vec![usize::MAX; n];
    for (rank, &i) in order.iter().enumerate() {
        for p in 0..n {
            if masks[i][p] {
                owner[p] = rank;
            }
        }
    }
    let mut alive: Vec<usize> = owner.iter().cloned().filter(|&r| r != usize::MAX).collect();
    alive.sort_unstable();
    alive.dedup();
    owner
        .iter()
        .map(|&r| match alive.binary_search(&r) {
            Ok(pos) => pos as i32 + 1,
            Err(_) => 0,
        })
        .collect()
}

/// Renumbers labels by first appearance in raster order so two partitions
/// can be compared regardless of their id scheme.
pub fn canonical<T: Ord + Copy>(labels: &[T]) -> Vec<usize> {
    let mut seen = BTreeMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = seen.len();
            *seen.entry(l).or_insert(next)
        })
        .collect()
}

/// 4-connected components by depth-first flood fill.
pub fn flood_fill<T: PartialEq>(values: &[T], h: usize, w: usize) -> Vec<usize> {
    let mut comp = vec![usize::MAX; values.len()];
    let mut next = 0;
    for start in 0..values.len() {
        if comp[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        comp[start] = next;
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if comp[j] == usize::MAX && values[j] == values[i] {
                    comp[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    comp
}

pub fn median(values: &[f32]) -> f32 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        ((v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0) as f32
    }
}

/// Five-point central difference of `f` along coordinate `i`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut at = |d: f64| {
        let mut y = x.to_vec();
        y[i] += d;
        f(&y)
    };
    (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
}

/// Relative error against the analytic value with a 1e-8 floor.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1e-8)
}

/// Runs the `sitskit` binary with an optional thread-count override.
pub fn sitskit(args: &[&str], threads: Option<&str>, cwd: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sitskit"));
    cmd.args(args).current_dir(cwd).env_remove("SITSKIT_THREADS");
    if let Some(t) = threads {
        cmd.env("SITSKIT_THREADS", t);
    }
    cmd.output().expect("failed to launch sitskit")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Value of `key=` in the CLI's `key=value` report.
pub fn report_value(o: &Output, key: &str) -> Option<String> {
    let prefix = format!("{key}=");
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix(&prefix).map(str::to_string))
}
