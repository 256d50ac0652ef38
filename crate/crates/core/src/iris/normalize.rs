use std::f64::consts::TAU;

use super::{EyeImage, Segmentation};
use crate::error::{Error, Result};

pub const POLAR_ROWS: usize = 64;
pub const POLAR_COLS: usize = 512;

/// Polar-unwrapped iris: row k is `r = k/63`, column m is `θ = 2πm/512`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedIris {
    pub pixels: Vec<f32>,
    pub mask: Vec<bool>,
    pub segmentation: Segmentation,
}

impl NormalizedIris {
    pub fn new(pixels: Vec<f32>, mask: Vec<bool>, segmentation: Segmentation) -> Result<Self> {
        let n = POLAR_ROWS * POLAR_COLS;
        if pixels.len() != n || mask.len() != n {
            return Err(Error::Shape(format!(
                "normalized iris needs {n} pixels and mask entries, got {} and {}",
                pixels.len(),
                mask.len()
            )));
        }
        Ok(NormalizedIris {
            pixels,
            mask,
            segmentation,
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * POLAR_COLS + col]
    }

    #[inline]
    pub fn valid(&self, row: usize, col: usize) -> bool {
        self.mask[row * POLAR_COLS + col]
    }

    pub fn to_gray(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

pub fn polar_radius(row: usize) -> f64 {
    row as f64 / (POLAR_ROWS - 1) as f64
}

pub fn polar_angle(col: usize) -> f64 {
    TAU * col as f64 / POLAR_COLS as f64
}

/// Image coordinates of polar point `(r, θ)`: the blend of the pupil and
/// limbus boundary points at angle θ about their own centers.
pub fn sampling_point(seg: &Segmentation, r: f64, theta: f64) -> (f64, f64) {
    let (xp, yp) = seg.pupil.point(theta);
    let (xs, ys) = seg.limbus.point(theta);
    ((1.0 - r) * xp + r * xs, (1.0 - r) * yp + r * ys)
}

fn nearest(mask: &[bool], width: usize, height: usize, x: f64, y: f64) -> bool {
    let (xi, yi) = (x.round(), y.round());
    if xi < 0.0 || yi < 0.0 || xi >= width as f64 || yi >= height as f64 {
        return false;
    }
    mask[yi as usize * width + xi as usize]
}

/// Rubber-sheet remap of `img`. Samples outside the image, or on pixels the
/// image mask marks invalid, are invalid.
pub fn normalize(img: &EyeImage, seg: &Segmentation) -> NormalizedIris {
    let n = POLAR_ROWS * POLAR_COLS;
    let mut pixels = vec![0.0f32; n];
    let mut mask = vec![false; n];
    for row in 0..POLAR_ROWS {
        let r = polar_radius(row);
        for col in 0..POLAR_COLS {
            let (x, y) = sampling_point(seg, r, polar_angle(col));
            if !img.contains(x, y) {
                continue;
            }
            let i = row * POLAR_COLS + col;
            pixels[i] = img.bilinear(x, y) as f32;
            mask[i] = match img.mask() {
                Some(m) => nearest(m, img.width(), img.height(), x, y),
                None => true,
            };
        }
    }
    NormalizedIris {
        pixels,
        mask,
        segmentation: *seg,
    }
}

/// Same mapping as [`normalize`] with nearest-neighbour lookup.
pub fn normalize_mask(mask: &[bool], width: usize, height: usize, seg: &Segmentation) -> Result<Vec<bool>> {
    if mask.len() != width * height {
        return Err(Error::Shape(format!(
            "mask has {} entries for {width}x{height}",
            mask.len()
        )));
    }
    let mut out = vec![false; POLAR_ROWS * POLAR_COLS];
    for row in 0..POLAR_ROWS {
        let r = polar_radius(row);
        for col in 0..POLAR_COLS {
            let (x, y) = sampling_point(seg, r, polar_angle(col));
            out[row * POLAR_COLS + col] = nearest(mask, width, height, x, y);
        }
    }
    Ok(out)
}

/// Circular shift (in columns) maximizing the cross-correlation of the
/// mean-removed rows of `b` against `a`: `b[col] ≈ a[col - shift]`.
pub fn best_column_shift(a: &NormalizedIris, b: &NormalizedIris, max_shift: usize) -> i64 {
    let centered = |n: &NormalizedIris| {
        let mean = n.pixels.iter().map(|v| *v as f64).sum::<f64>() / n.pixels.len() as f64;
        n.pixels.iter().map(|v| *v as f64 - mean).collect::<Vec<_>>()
    };
    let (ca, cb) = (centered(a), centered(b));
    let mut best = (f64::NEG_INFINITY, 0i64);
    for s in -(max_shift as i64)..=max_shift as i64 {
        let mut acc = 0.0;
        for row in 0..POLAR_ROWS {
            for col in 0..POLAR_COLS {
                let src = (col as i64 - s).rem_euclid(POLAR_COLS as i64) as usize;
                let (i, j) = (row * POLAR_COLS + col, row * POLAR_COLS + src);
                if a.mask[j] && b.mask[i] {
                    acc += cb[i] * ca[j];
                }
            }
        }
        if acc > best.0 {
            best = (acc, s);
        }
    }
    best.1
}
