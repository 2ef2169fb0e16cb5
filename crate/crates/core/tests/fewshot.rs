use proptest::prelude::*;
use sitskit::fewshot::{
    apply_norm, fit_norm, invert_norm, sample_split, sample_split_stratified, spatial_crop, split_size,
    temporal_dropout, AugmentSpec, STD_FLOOR,
};
use sitskit::{frame_quality, BandMap, CloudParams, SeededRng, SitsCube};

proptest! {
    #[test]
    fn split_is_a_sorted_sample_of_the_right_size(ratio in 0.0001f64..=1.0, n in 1usize..400, seed in any::<u64>()) {
        let s = sample_split(ratio, seed, n).unwrap();
        let want = ((ratio * n as f64).round() as usize).max(1).min(n);
        prop_assert_eq!(s.selected.len(), want);
        prop_assert_eq!(split_size(ratio, n), want);
        prop_assert!(s.selected.windows(2).all(|p| p[0] < p[1]));
        prop_assert!(s.selected.iter().all(|&i| i < n));
        prop_assert_eq!(&s, &sample_split(ratio, seed, n).unwrap());
    }
}

#[test]
fn seeds_give_different_valid_splits() {
    let a = sample_split(0.05, 42, 100).unwrap();
    let b = sample_split(0.05, 2025, 100).unwrap();
    assert_eq!((a.selected.len(), b.selected.len()), (5, 5));
    assert_ne!(a.selected, b.selected);
}

#[test]
fn every_item_is_equally_likely() {
    let (n, m, runs) = (20, 4, 4000);
    let mut hits = vec![0usize; n];
    for seed in 0..runs {
        for i in sample_split(m as f64 / n as f64, seed, n).unwrap().selected {
            hits[i] += 1;
        }
    }
    let expect = (runs as usize * m / n) as f64;
    for (i, &h) in hits.iter().enumerate() {
        // about 5.5 standard deviations
        assert!(
            (h as f64 - expect).abs() < 0.06 * runs as f64,
            "item {i}: {h} vs {expect}"
        );
    }
}

#[test]
fn stratified_split_sizes_per_class() {
    let mut rng = SeededRng::new(3);
    let classes: Vec<i32> = (0..1000).map(|_| [0, 0, 0, 1, 1, 2, 7][rng.below(7)]).collect();
    let s = sample_split_stratified(0.03, 11, &classes).unwrap();
    for c in [0, 1, 2, 7] {
        let n = classes.iter().filter(|&&x| x == c).count();
        let got = s.selected.iter().filter(|&&i| classes[i] == c).count();
        assert_eq!(got, split_size(0.03, n), "class {c}");
    }
    assert_eq!(s, sample_split_stratified(0.03, 11, &classes).unwrap());
}

/// Values encode `(t, c, y, x)` so crops can be checked pixel by pixel.
fn coded_cube(t: usize, c: usize, h: usize, w: usize) -> SitsCube {
    let values = (0..t * c * h * w).map(|i| i as f32).collect();
    SitsCube::from_reflectance([t, c, h, w], values, BandMap::empty()).unwrap()
}

#[test]
fn crops_stay_aligned_across_frames_channels_and_labels() {
    let (t, c, h, w) = (3, 2, 20, 17);
    let cube = coded_cube(t, c, h, w);
    let labels: Vec<i32> = (0..(h * w) as i32).collect();
    let spec = AugmentSpec {
        crop: 6,
        ..Default::default()
    };
    let mut rng = SeededRng::new(5);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..2000 {
        let out = spatial_crop(&cube, &labels, &spec, &mut rng).unwrap();
        let (y0, x0) = out.offset;
        assert!(y0 + 6 <= h && x0 + 6 <= w);
        seen.insert((y0, x0));
        for y in 0..6 {
            for x in 0..6 {
                let src = (y0 + y) * w + x0 + x;
                assert_eq!(out.labels[y * 6 + x], src as i32);
                for ti in 0..t {
                    for ci in 0..c {
                        assert_eq!(out.cube.plane(ti, ci)[y * 6 + x], ((ti * c + ci) * h * w + src) as f32);
                    }
                }
            }
        }
    }
    // every admissible offset turns up
    assert_eq!(seen.len(), (h - 5) * (w - 5));
}

#[test]
fn crop_larger_than_image_is_rejected() {
    let cube = coded_cube(1, 1, 8, 8);
    let spec = AugmentSpec {
        crop: 9,
        ..Default::default()
    };
    let e = spatial_crop(&cube, &[0; 64], &spec, &mut SeededRng::new(1)).unwrap_err();
    assert_eq!(e.kind(), "validation");
}

#[test]
fn dropout_keeps_order_and_a_floor_of_one_frame() {
    let cube = coded_cube(12, 1, 2, 2);
    let spec = AugmentSpec::default();
    let mut rng = SeededRng::new(8);
    let mut dropped = 0usize;
    let runs = 2000;
    for _ in 0..runs {
        let (out, kept) = temporal_dropout(&cube, &spec, &mut rng, None).unwrap();
        assert!(!kept.is_empty());
        assert!(kept.windows(2).all(|p| p[0] < p[1]));
        assert_eq!(out, cube.select_frames(&kept).unwrap());
        dropped += 12 - kept.len();
    }
    // the rate is uniform on [0.1, 0.3], so on average 20% of frames go
    let rate = dropped as f64 / (12 * runs) as f64;
    assert!((rate - 0.2).abs() < 0.01, "{rate}");
}

#[test]
fn total_dropout_falls_back_to_the_least_cloudy_frame() {
    // frame 2 is the only clear one
    let (t, hw) = (4, 4);
    let mut values = Vec::new();
    for ti in 0..t {
        for ch in 0..5 {
            for _ in 0..hw {
                values.push(if ch == 1 {
                    0.3
                } else if ti == 2 {
                    0.05
                } else {
                    0.9
                });
            }
        }
    }
    let cube = SitsCube::from_reflectance([t, 5, 2, 2], values, BandMap::default()).unwrap();
    let fq = frame_quality(&cube, &CloudParams::default()).unwrap();
    let spec = AugmentSpec {
        temporal_drop: (0.999999, 0.999999),
        ..Default::default()
    };
    let mut rng = SeededRng::new(1);
    let (_, kept) = temporal_dropout(&cube, &spec, &mut rng, Some(&fq)).unwrap();
    assert_eq!(kept, vec![2]);
    let (_, kept) = temporal_dropout(&cube, &spec, &mut rng, None).unwrap();
    assert_eq!(kept, vec![0]);
}

#[test]
fn normalisation_standardises_and_inverts() {
    let mut rng = SeededRng::new(4);
    let (t, c, h, w) = (5, 3, 6, 7);
    let values = (0..t * c * h * w)
        .map(|i| {
            let ch = (i / (h * w)) % c;
            if ch == 2 {
                0.25
            } else {
                (rng.range(0.0, 1.0) * (ch + 1) as f64 + ch as f64) as f32
            }
        })
        .collect();
    let cube = SitsCube::from_reflectance([t, c, h, w], values, BandMap::empty()).unwrap();
    let stats = fit_norm(&[&cube]).unwrap();
    assert_eq!(stats.std[2], STD_FLOOR);
    let z = apply_norm(&cube, &stats).unwrap();
    let again = fit_norm(&[&z]).unwrap();
    for ch in 0..2 {
        assert!(again.mean[ch].abs() < 1e-6);
        assert!((again.std[ch] - 1.0).abs() < 1e-6);
    }
    assert!(z.values().iter().all(|v| v.is_finite()));
    let back = invert_norm(&z, &stats).unwrap();
    for (a, b) in back.values().iter().zip(cube.values()) {
        assert!((a - b).abs() < 1e-5);
    }
}
