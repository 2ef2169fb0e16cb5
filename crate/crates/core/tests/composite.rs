mod common;

use sitskit::composite::{
    composite_mean, composite_median, composite_median_with, fuse_rgb, fusion_weights, stretch_channel, stretched_rgb,
    to_uint8, Stretch,
};
use sitskit::{frame_quality, BandMap, CloudParams, Exec, SeededRng, SitsCube};

fn random_cube(seed: u64, t: usize, h: usize, w: usize) -> SitsCube {
    let mut rng = SeededRng::new(seed);
    let values = (0..t * 5 * h * w).map(|_| rng.range(0.0, 0.6) as f32).collect();
    SitsCube::from_reflectance([t, 5, h, w], values, BandMap::default()).unwrap()
}

/// Percentile by linear interpolation between closest ranks.
fn percentile(values: &[f32], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(v.len() - 1);
    v[i] + (v[j] - v[i]) * (pos - i as f64)
}

#[test]
fn median_matches_sorting_oracle() {
    for (t, seed) in [(1, 1), (4, 2), (5, 3)] {
        let cube = random_cube(seed, t, 6, 7);
        let frames: Vec<usize> = (0..t).collect();
        let m = composite_median(&cube, &frames).unwrap();
        let n = 5 * 42;
        for i in 0..n {
            let series: Vec<f32> = (0..t).map(|f| cube.frame(f)[i]).collect();
            assert_eq!(m.values[i], common::median(&series), "t={t} i={i}");
        }
        let par = composite_median_with(&cube, &frames, Exec::Parallel).unwrap();
        assert_eq!(par, composite_median_with(&cube, &frames, Exec::Sequential).unwrap());
    }
}

#[test]
fn mean_over_a_frame_subset() {
    let cube = random_cube(4, 6, 5, 5);
    let frames = [1, 4, 5];
    let m = composite_mean(&cube, &frames).unwrap();
    for i in 0..5 * 25 {
        let want = frames.iter().map(|&f| cube.frame(f)[i] as f64).sum::<f64>() / 3.0;
        assert!((m.values[i] as f64 - want).abs() < 1e-6);
    }
    assert!(composite_mean(&cube, &[]).is_err());
    assert!(composite_mean(&cube, &[6]).is_err());
}

#[test]
fn percentile_stretch_matches_oracle() {
    let mut rng = SeededRng::new(9);
    let v: Vec<f32> = (0..257).map(|_| rng.range(-0.1, 0.9) as f32).collect();
    let (lo, hi) = (percentile(&v, 2.0), percentile(&v, 98.0));
    let s = stretch_channel(&v, Stretch::default());
    for (x, y) in v.iter().zip(&s) {
        let want = ((*x as f64 - lo) / (hi - lo)).clamp(0.0, 1.0);
        assert!((*y as f64 - want).abs() < 1e-6);
    }
}

#[test]
fn fused_rgb_is_a_convex_combination_of_stretched_frames() {
    let cube = random_cube(12, 6, 9, 11);
    let fq = frame_quality(&cube, &CloudParams::default()).unwrap();
    let fused = fuse_rgb(&cube, &fq, Stretch::default()).unwrap();
    let w = fusion_weights(&fq);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(w.iter().all(|&x| x > 0.0));
    let frames: Vec<Vec<f32>> = fq
        .clear_set
        .iter()
        .map(|&t| stretched_rgb(&cube, t, Stretch::default()).unwrap())
        .collect();
    for (i, &v) in fused.values.iter().enumerate() {
        let lo = frames.iter().map(|f| f[i]).fold(f32::INFINITY, f32::min);
        let hi = frames.iter().map(|f| f[i]).fold(f32::NEG_INFINITY, f32::max);
        assert!(lo <= v && v <= hi, "pixel {i}: {v} outside [{lo}, {hi}]");
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn identical_frames_fuse_to_that_frame() {
    let one = random_cube(21, 1, 8, 8);
    let cube = one.select_frames(&[0, 0, 0]).unwrap();
    let fq = frame_quality(&cube, &CloudParams::default()).unwrap();
    // equal sharpness normalises to zero; the floor keeps the weights equal
    assert!(fq.sharpness.iter().all(|&s| s == 0.0));
    let fused = fuse_rgb(&cube, &fq, Stretch::default()).unwrap();
    let frame = stretched_rgb(&one, 0, Stretch::default()).unwrap();
    for (a, b) in fused.values.iter().zip(&frame) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn uint8_rounds_and_clips() {
    assert_eq!(
        to_uint8(&[0.0, 1.0, 0.6 / 255.0, 1.6 / 255.0, -0.2, 1.7]),
        vec![0, 255, 1, 2, 0, 255]
    );
}
