use std::f64::consts::{PI, TAU};

use proptest::prelude::*;

use super::*;
use crate::error::Error;

fn disk(size: usize, cx: f64, cy: f64, r: f64, inside: u8, outside: u8) -> EyeImage {
    let px = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64, (i / size) as f64);
            if (x - cx).hypot(y - cy) < r {
                inside
            } else {
                outside
            }
        })
        .collect();
    EyeImage::new(size, size, px).unwrap()
}

fn two_circles(levels: [u8; 3]) -> EyeImage {
    let px = (0..256 * 256)
        .map(|i| {
            let (x, y) = ((i % 256) as f64, (i / 256) as f64);
            let d = (x - 120.0).hypot(y - 131.0);
            let dl = (x - 124.0).hypot(y - 128.0);
            if d < 35.0 {
                levels[0]
            } else if dl < 95.0 {
                levels[1]
            } else {
                levels[2]
            }
        })
        .collect();
    EyeImage::new(256, 256, px).unwrap()
}

fn correlation(a: &NormalizedIris, b: &NormalizedIris) -> f64 {
    let n = a.pixels.len() as f64;
    let ma = a.pixels.iter().map(|v| *v as f64).sum::<f64>() / n;
    let mb = b.pixels.iter().map(|v| *v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.pixels.iter().zip(&b.pixels) {
        let (dx, dy) = (*x as f64 - ma, *y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    sab / (saa * sbb).sqrt()
}

#[test]
fn uniform_image_has_no_response() {
    let img = EyeImage::filled(64, 64, 90).unwrap();
    for r in [3.0, 10.0, 20.0, 30.0] {
        let v = idiff_response(&img, &CircleParams::new(31.5, 31.5, r), 1.5, 64).unwrap();
        assert_eq!(v, 0.0);
    }
}

#[test]
fn disk_edge_peaks_at_true_radius() {
    let img = disk(128, 64.0, 64.0, 30.0, 200, 50);
    let at = |r| idiff_response(&img, &CircleParams::new(64.0, 64.0, r), 1.5, 64).unwrap();
    let peak = at(30.0);
    assert!(peak > at(25.0) && peak > at(35.0), "{peak} {} {}", at(25.0), at(35.0));
}

#[test]
fn response_ignores_intensity_offset() {
    let img = disk(128, 60.0, 66.0, 25.0, 150, 40);
    let brighter = img.offset(37);
    for r in [20.0, 25.0, 31.0] {
        let c = CircleParams::new(61.0, 64.0, r);
        let a = idiff_response(&img, &c, 1.5, 64).unwrap();
        let b = idiff_response(&brighter, &c, 1.5, 64).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn response_rejects_bad_circles() {
    let img = EyeImage::filled(64, 64, 0).unwrap();
    assert!(matches!(
        idiff_response(&img, &CircleParams::new(10.0, 32.0, 20.0), 1.5, 64),
        Err(Error::CircleOutOfBounds { .. })
    ));
    assert!(idiff_response(&img, &CircleParams::new(32.0, 32.0, 0.0), 1.5, 64).is_err());
    assert!(idiff_response(&img, &CircleParams::new(32.0, 32.0, 10.0), 1.5, 8).is_err());
}

#[test]
fn segments_default_synthetic_eye() {
    let eye = synth_iris(3, &SynthParams::default()).unwrap();
    let seg = segment(&eye.image, &SegmentParams::default()).unwrap();
    for (got, want) in [(seg.pupil, eye.truth.pupil), (seg.limbus, eye.truth.limbus)] {
        assert!((got.x0 - want.x0).abs() <= 2.0, "{got:?} vs {want:?}");
        assert!((got.y0 - want.y0).abs() <= 2.0, "{got:?} vs {want:?}");
        assert!((got.r - want.r).abs() <= 2.0, "{got:?} vs {want:?}");
    }
    assert_eq!(segment(&eye.image, &SegmentParams::default()).unwrap(), seg);
}

#[test]
fn uniform_image_has_no_circular_edge() {
    let img = EyeImage::filled(256, 256, 128).unwrap();
    assert!(matches!(
        segment(&img, &SegmentParams::default()),
        Err(Error::NoCircularEdge { .. })
    ));
}

#[test]
fn segmentation_survives_intensity_scaling() {
    let dim = two_circles([20, 50, 80]);
    let bright = two_circles([40, 100, 160]);
    let p = SegmentParams::default();
    let a = segment(&dim, &p).unwrap();
    assert_eq!(a, segment(&bright, &p).unwrap());
    assert_eq!((a.pupil.x0, a.pupil.y0), (120.0, 131.0));
}

#[test]
fn segment_rejects_overlapping_ranges() {
    let img = EyeImage::filled(256, 256, 128).unwrap();
    let p = SegmentParams {
        pupil_radius: (20, 80),
        limbus_radius: (80, 120),
        ..Default::default()
    };
    assert!(matches!(segment(&img, &p), Err(Error::Contract(_))));
}

fn off_center() -> Segmentation {
    Segmentation::new(
        CircleParams::new(126.3, 130.7, 38.5),
        CircleParams::new(128.0, 128.0, 101.0),
    )
    .unwrap()
}

#[test]
fn boundary_rows_sample_the_circles() {
    let eye = synth_iris(
        9,
        &SynthParams {
            pupil: CircleParams::new(126.3, 130.7, 38.5),
            limbus: CircleParams::new(128.0, 128.0, 101.0),
            ..Default::default()
        },
    )
    .unwrap();
    let seg = off_center();
    let n = normalize(&eye.image, &seg);
    for col in (0..POLAR_COLS).step_by(7) {
        let t = polar_angle(col);
        let (xp, yp) = seg.pupil.point(t);
        let (xs, ys) = seg.limbus.point(t);
        assert_eq!(n.get(0, col), eye.image.bilinear(xp, yp) as f32);
        assert_eq!(n.get(POLAR_ROWS - 1, col), eye.image.bilinear(xs, ys) as f32);
    }
}

proptest! {
    #[test]
    fn sampling_endpoints_lie_on_circles(
        px in 60.0..200.0f64, py in 60.0..200.0f64, pr in 5.0..40.0f64,
        dx in -10.0..10.0f64, dy in -10.0..10.0f64, extra in 15.0..80.0f64,
        theta in 0.0..TAU,
    ) {
        let seg = Segmentation::new(
            CircleParams::new(px, py, pr),
            CircleParams::new(px + dx, py + dy, pr + extra),
        ).unwrap();
        let (x0, y0) = sampling_point(&seg, 0.0, theta);
        let (x1, y1) = sampling_point(&seg, 1.0, theta);
        prop_assert!(((x0 - px).hypot(y0 - py) - pr).abs() < 1e-9);
        prop_assert!(((x1 - px - dx).hypot(y1 - py - dy) - pr - extra).abs() < 1e-9);
    }
}

#[test]
fn rotation_becomes_column_shift() {
    let params = SynthParams {
        noise_std: 0.0,
        identity: 42,
        ..Default::default()
    };
    let eye = synth_iris(1, &params).unwrap();
    let base = normalize(&eye.image, &eye.truth);
    for deg in [10.0f64, -10.0] {
        let theta = deg.to_radians();
        let rotated = eye.image.rotated(128.0, 128.0, theta, 190);
        let n = normalize(&rotated, &eye.truth);
        let expect = (POLAR_COLS as f64 * theta / TAU).round() as i64;
        let got = best_column_shift(&base, &n, 40);
        assert!((got - expect).abs() <= 1, "{deg}°: shift {got}, expected {expect}");
    }
}

#[test]
fn all_valid_mask_stays_valid() {
    let seg = off_center();
    let polar = normalize_mask(&vec![true; 256 * 256], 256, 256, &seg).unwrap();
    assert!(polar.iter().all(|v| *v));
    assert_eq!(normalize_mask(&vec![true; 256 * 256], 256, 256, &seg).unwrap(), polar);
    assert!(normalize_mask(&[true; 3], 256, 256, &seg).is_err());
}

#[test]
fn eyelid_band_masks_columns_around_the_top() {
    let params = SynthParams {
        eyelid_row: Some(60.0),
        ..Default::default()
    };
    let eye = synth_iris(5, &params).unwrap();
    let polar = normalize_mask(eye.image.mask().unwrap(), 256, 256, &eye.truth).unwrap();
    // Geometry: a sample is occluded iff its rounded row is above the lid.
    for row in 0..POLAR_ROWS {
        for col in 0..POLAR_COLS {
            let (_, y) = sampling_point(&eye.truth, polar_radius(row), polar_angle(col));
            assert_eq!(polar[row * POLAR_COLS + col], y.round() >= 60.0, "({row},{col})");
        }
    }
    let invalid_cols: Vec<usize> = (0..POLAR_COLS)
        .filter(|c| (0..POLAR_ROWS).any(|r| !polar[r * POLAR_COLS + c]))
        .collect();
    let quarter = POLAR_COLS / 4;
    assert!(invalid_cols.contains(&quarter));
    assert!(!invalid_cols.contains(&(3 * quarter)));
    let mean = invalid_cols.iter().sum::<usize>() as f64 / invalid_cols.len() as f64;
    assert!((mean - quarter as f64).abs() <= 1.0, "centered at {mean}");
    // normalize() carries the image mask through.
    assert_eq!(normalize(&eye.image, &eye.truth).mask, polar);
}

#[test]
fn synthesis_is_deterministic() {
    let p = SynthParams {
        identity: 17,
        rotation: 0.3,
        eyelid_row: Some(50.0),
        ..Default::default()
    };
    assert_eq!(synth_iris(8, &p).unwrap(), synth_iris(8, &p).unwrap());
    assert_ne!(synth_iris(8, &p).unwrap(), synth_iris(9, &p).unwrap());
    assert!(synth_iris(
        0,
        &SynthParams {
            limbus: CircleParams::new(128.0, 128.0, 140.0),
            ..Default::default()
        }
    )
    .is_err());
}

#[test]
fn same_identity_correlates_more_than_different() {
    let render = |id: u64, seed: u64, rot: f64| {
        let e = synth_iris(
            seed,
            &SynthParams {
                identity: id,
                rotation: rot,
                noise_std: 6.0,
                ..Default::default()
            },
        )
        .unwrap();
        normalize(&e.image, &e.truth)
    };
    let (mut same, mut diff) = (0.0, 0.0);
    for k in 0..50u64 {
        let a = render(2 * k, 1000 + k, 0.0);
        let a2 = render(2 * k, 2000 + k, 0.0);
        let b = render(2 * k + 1, 3000 + k, 0.0);
        same += correlation(&a, &a2);
        diff += correlation(&a, &b).abs();
    }
    assert!(same / 50.0 > diff / 50.0, "same {same} diff {diff}");
    assert!(same / 50.0 > 0.5);
}

#[test]
fn rotation_parameter_turns_texture() {
    let make = |rot: f64| {
        let e = synth_iris(
            0,
            &SynthParams {
                identity: 4,
                rotation: rot,
                noise_std: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        normalize(&e.image, &e.truth)
    };
    let eighth = PI / 8.0;
    let got = best_column_shift(&make(0.0), &make(eighth), 80);
    assert!((got - 32).abs() <= 1, "{got}");
}
