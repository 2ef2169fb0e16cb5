//! Finite-difference verification of the region loss gradient.

use std::fmt::Write as _;

use rand::RngCore;

use crate::error::Result;
use crate::par::Exec;
use crate::region_loss::{LogitsCube, LossConfig, RegionLayout, RegionLossPlan};
use crate::region_prior::{random_superpixels, RegionMap};
use crate::rng::SeededRng;

/// Step used by both stencils.
pub const STEP: f64 = 1e-3;
/// Analytic magnitudes below this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckCase {
    pub index: usize,
    pub shape: [usize; 4],
    /// Region count of the instance's map.
    pub regions: usize,
    /// Five-point central stencil; this is the gated figure.
    pub max_rel_error: f64,
    /// Plain central difference, for reference.
    pub max_rel_error_3pt: f64,
}

/// `|analytic - numeric| / max(|analytic|, 1e-8)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(REL_FLOOR)
}

/// Random instance: `B <= 3`, `K <= 5`, `2 <= H, W <= 16`, `1 <= Q <= 8`
/// Voronoi regions, logits uniform in `[-3, 3]`.
pub fn random_instance(rng: &mut SeededRng) -> Result<(LogitsCube, RegionMap)> {
    let b = 1 + rng.below(3);
    let k = 1 + rng.below(5);
    let h = 2 + rng.below(15);
    let w = 2 + rng.below(15);
    let q = 1 + rng.below(8);
    let map = random_superpixels(h, w, q, rng.next_u64())?;
    let logits = (0..b * k * h * w).map(|_| rng.range(-3.0, 3.0)).collect();
    Ok((LogitsCube::new([b, k, h, w], logits)?, map))
}

/// Compares the analytic gradient to five- and three-point differences at
/// every logit.
pub fn check_instance(pred: &LogitsCube, map: &RegionMap, config: LossConfig, exec: Exec) -> Result<(f64, f64)> {
    let [b, _, h, w] = pred.shape();
    let layout = RegionLayout::new(std::slice::from_ref(map), b, h, w, config)?;
    let analytic = RegionLossPlan::new(pred, &layout, exec)?.gradient(exec);
    let errors = exec.map_range(pred.logits.len(), |i| {
        let mut p = pred.clone();
        let mut at = |delta: f64| {
            p.logits[i] = pred.logits[i] + delta;
            RegionLossPlan::new(&p, &layout, Exec::Sequential)
                .expect("layout matches")
                .loss_value()
        };
        let (f2p, f1p, f1m, f2m) = (at(2.0 * STEP), at(STEP), at(-STEP), at(-2.0 * STEP));
        let five = (-f2p + 8.0 * f1p - 8.0 * f1m + f2m) / (12.0 * STEP);
        let three = (f1p - f1m) / (2.0 * STEP);
        (rel_error(analytic[i], five), rel_error(analytic[i], three))
    });
    Ok(errors
        .into_iter()
        .fold((0.0f64, 0.0f64), |(a, b), (x, y)| (a.max(x), b.max(y))))
}

pub fn grad_check_suite(instances: usize, seed: u64, exec: Exec) -> Result<Vec<GradCheckCase>> {
    let mut rng = SeededRng::new(seed);
    (0..instances)
        .map(|index| {
            let (pred, map) = random_instance(&mut rng)?;
            let (five, three) = check_instance(&pred, &map, LossConfig::default(), exec)?;
            Ok(GradCheckCase {
                index,
                shape: pred.shape(),
                regions: map.region_count(),
                max_rel_error: five,
                max_rel_error_3pt: three,
            })
        })
        .collect()
}

pub fn grad_check_csv(cases: &[GradCheckCase]) -> String {
    let mut s = String::from("instance,batch,classes,height,width,regions,max_rel_error,max_rel_error_3pt\n");
    for c in cases {
        let [b, k, h, w] = c.shape;
        writeln!(
            s,
            "{},{b},{k},{h},{w},{},{},{}",
            c.index, c.regions, c.max_rel_error, c.max_rel_error_3pt
        )
        .unwrap();
    }
    s
}
