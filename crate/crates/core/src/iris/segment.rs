use serde::{Deserialize, Serialize};

use super::EyeImage;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleParams {
    pub x0: f64,
    pub y0: f64,
    pub r: f64,
}

impl CircleParams {
    pub fn new(x0: f64, y0: f64, r: f64) -> Self {
        CircleParams { x0, y0, r }
    }

    /// Point at angle `theta`, measured counter-clockwise from +x with the
    /// image y axis pointing down.
    pub fn point(&self, theta: f64) -> (f64, f64) {
        (self.x0 + self.r * theta.cos(), self.y0 - self.r * theta.sin())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.x0).hypot(y - self.y0) < self.r
    }

    fn inside(&self, img: &EyeImage) -> bool {
        self.r > 0.0
            && self.x0 - self.r >= 0.0
            && self.y0 - self.r >= 0.0
            && self.x0 + self.r <= (img.width() - 1) as f64
            && self.y0 + self.r <= (img.height() - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub pupil: CircleParams,
    pub limbus: CircleParams,
}

impl Segmentation {
    pub fn new(pupil: CircleParams, limbus: CircleParams) -> Result<Self> {
        if !(pupil.r > 0.0 && limbus.r > pupil.r) {
            return Err(Error::Contract(format!(
                "limbus radius {} must exceed pupil radius {} > 0",
                limbus.r, pupil.r
            )));
        }
        if !limbus.contains(pupil.x0, pupil.y0) {
            return Err(Error::Contract(
                "pupil center lies outside the limbus circle".into(),
            ));
        }
        Ok(Segmentation { pupil, limbus })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentParams {
    pub pupil_radius: (usize, usize),
    pub limbus_radius: (usize, usize),
    pub sigma: f64,
    pub n_theta: usize,
    /// Weakest response accepted as an edge, in gray levels per pixel.
    pub noise_floor: f64,
    /// Limbus centers are searched within this many pixels of the pupil
    /// center on each axis.
    pub limbus_window: usize,
    /// Grid step of the coarse pupil-center pass.
    pub coarse_step: usize,
}

impl Default for SegmentParams {
    fn default() -> Self {
        SegmentParams {
            pupil_radius: (20, 70),
            limbus_radius: (75, 125),
            sigma: 1.5,
            n_theta: 64,
            noise_floor: 1.0,
            limbus_window: 10,
            coarse_step: 4,
        }
    }
}

fn gaussian(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as usize;
    let w: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let k = i as f64 - half as f64;
            if sigma > 0.0 {
                (-k * k / (2.0 * sigma * sigma)).exp()
            } else {
                1.0
            }
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Unit contour directions `(cos θ, −sin θ)` for `n` evenly spaced angles.
fn directions(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|k| {
            let t = std::f64::consts::TAU * k as f64 / n as f64;
            (t.cos(), -t.sin())
        })
        .collect()
}

/// Mean intensity along the circle of radius `rho` (clamped at 0).
fn contour_mean(img: &EyeImage, x0: f64, y0: f64, rho: f64, dirs: &[(f64, f64)]) -> f64 {
    let rho = rho.max(0.0);
    let sum: f64 = dirs
        .iter()
        .map(|(dx, dy)| img.bilinear(x0 + rho * dx, y0 + rho * dy))
        .sum();
    sum / dirs.len() as f64
}

/// Contour means at `first, first+1, ...` (`len` values).
fn profile(img: &EyeImage, x0: f64, y0: f64, first: f64, len: usize, dirs: &[(f64, f64)]) -> Vec<f64> {
    (0..len)
        .map(|i| contour_mean(img, x0, y0, first + i as f64, dirs))
        .collect()
}

/// Smoothed derivative at profile index `i`; needs `half + 1` entries on
/// either side.
fn smoothed_derivative(profile: &[f64], i: usize, g: &[f64]) -> f64 {
    let half = g.len() / 2;
    g.iter()
        .enumerate()
        .map(|(j, w)| {
            let at = i + j - half;
            w * (profile[at + 1] - profile[at - 1]) / 2.0
        })
        .sum()
}

/// Blurred radial derivative of the mean contour intensity at `c.r`.
pub fn idiff_response(img: &EyeImage, c: &CircleParams, sigma: f64, n_theta: usize) -> Result<f64> {
    if n_theta < 16 {
        return Err(Error::Contract(format!("n_theta {n_theta} < 16")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Contract(format!("sigma {sigma} must be >= 0")));
    }
    if !c.inside(img) {
        return Err(Error::CircleOutOfBounds {
            x0: c.x0,
            y0: c.y0,
            r: c.r,
        });
    }
    let g = gaussian(sigma);
    let half = g.len() / 2;
    let p = profile(img, c.x0, c.y0, c.r - (half + 1) as f64, g.len() + 2, &directions(n_theta));
    Ok(smoothed_derivative(&p, half + 1, &g).abs())
}

/// Best `(response, radius)` for the center `(x0, y0)` over `lo..=hi`,
/// skipping radii whose circle leaves the image.
fn best_radius(
    img: &EyeImage,
    x0: usize,
    y0: usize,
    (lo, hi): (usize, usize),
    g: &[f64],
    dirs: &[(f64, f64)],
) -> Option<(f64, usize)> {
    let reach = [x0, y0, img.width() - 1 - x0, img.height() - 1 - y0]
        .into_iter()
        .min()
        .unwrap();
    let hi = hi.min(reach);
    if hi < lo || lo == 0 {
        return None;
    }
    let half = g.len() / 2;
    let first = lo as f64 - (half + 1) as f64;
    let p = profile(img, x0 as f64, y0 as f64, first, hi - lo + g.len() + 2, dirs);
    let mut best: Option<(f64, usize)> = None;
    for r in lo..=hi {
        let v = smoothed_derivative(&p, r - lo + half + 1, g).abs();
        if best.is_none_or(|(b, _)| v > b) {
            best = Some((v, r));
        }
    }
    best
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    response: f64,
    x: usize,
    y: usize,
    r: usize,
}

fn search_centers(
    img: &EyeImage,
    centers: impl Iterator<Item = (usize, usize)>,
    radii: (usize, usize),
    g: &[f64],
    dirs: &[(f64, f64)],
) -> Vec<Hit> {
    centers
        .filter_map(|(x, y)| {
            best_radius(img, x, y, radii, g, dirs).map(|(response, r)| Hit {
                response,
                x,
                y,
                r,
            })
        })
        .collect()
}

fn strongest(hits: &[Hit]) -> Option<Hit> {
    hits.iter()
        .copied()
        .reduce(|a, b| if b.response > a.response { b } else { a })
}

fn window(c: usize, half: usize, limit: usize) -> std::ops::RangeInclusive<usize> {
    c.saturating_sub(half)..=(c + half).min(limit - 1)
}

/// Locates the pupil and limbus circles by maximizing the integro-differential
/// response: a coarse center grid, refinement around the best coarse hits,
/// then a limbus search near the pupil center.
pub fn segment(img: &EyeImage, params: &SegmentParams) -> Result<Segmentation> {
    let (plo, phi) = params.pupil_radius;
    let (llo, lhi) = params.limbus_radius;
    if plo == 0 || plo > phi || llo > lhi || phi >= llo {
        return Err(Error::Contract(format!(
            "radius ranges must be non-empty with pupil {plo}..={phi} below limbus {llo}..={lhi}"
        )));
    }
    if params.n_theta < 16 || params.coarse_step == 0 || !(params.sigma >= 0.0) {
        return Err(Error::Contract(
            "segmentation needs n_theta >= 16, coarse_step >= 1 and sigma >= 0".into(),
        ));
    }
    let (w, h) = (img.width(), img.height());
    if w <= 2 * plo || h <= 2 * plo {
        return Err(Error::Contract(format!(
            "{w}x{h} image cannot hold a pupil of radius {plo}"
        )));
    }
    let g = gaussian(params.sigma);
    let dirs = directions(params.n_theta);
    let step = params.coarse_step;

    let coarse = search_centers(
        img,
        (plo..h - plo)
            .step_by(step)
            .flat_map(|y| (plo..w - plo).step_by(step).map(move |x| (x, y))),
        (plo, phi),
        &g,
        &dirs,
    );
    let mut ranked = coarse;
    ranked.sort_by(|a, b| b.response.total_cmp(&a.response).then((a.y, a.x).cmp(&(b.y, b.x))));
    let mut fine = Vec::new();
    for seed in ranked.iter().take(5) {
        fine.extend(search_centers(
            img,
            window(seed.y, step, h)
                .flat_map(|y| window(seed.x, step, w).map(move |x| (x, y))),
            (plo, phi),
            &g,
            &dirs,
        ));
    }
    let pupil = strongest(&fine).ok_or(Error::NoCircularEdge {
        response: 0.0,
        floor: params.noise_floor,
    })?;
    if !(pupil.response >= params.noise_floor) {
        return Err(Error::NoCircularEdge {
            response: pupil.response,
            floor: params.noise_floor,
        });
    }

    let lw = params.limbus_window;
    let limbus_hits = search_centers(
        img,
        window(pupil.y, lw, h).flat_map(|y| window(pupil.x, lw, w).map(move |x| (x, y))),
        (llo.max(pupil.r + 1), lhi),
        &g,
        &dirs,
    );
    let limbus = limbus_hits
        .into_iter()
        .filter(|l| (l.x as f64 - pupil.x as f64).hypot(l.y as f64 - pupil.y as f64) < l.r as f64)
        .reduce(|a, b| if b.response > a.response { b } else { a })
        .ok_or(Error::NoCircularEdge {
            response: 0.0,
            floor: params.noise_floor,
        })?;
    if !(limbus.response >= params.noise_floor) {
        return Err(Error::NoCircularEdge {
            response: limbus.response,
            floor: params.noise_floor,
        });
    }
    Segmentation::new(
        CircleParams::new(pupil.x as f64, pupil.y as f64, pupil.r as f64),
        CircleParams::new(limbus.x as f64, limbus.y as f64, limbus.r as f64),
    )
}
