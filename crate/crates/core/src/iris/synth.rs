use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CircleParams, EyeImage, Segmentation};
use crate::error::{Error, Result};

/// One sinusoid of an identity texture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureWave {
    pub amplitude: f64,
    /// Cycles across the annulus, pupil to limbus.
    pub radial: f64,
    /// Cycles around the circle; integral so the texture wraps.
    pub angular: i32,
    pub phase: f64,
}

/// Band-limited radial/angular texture fixed per identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrisTexture {
    pub waves: Vec<TextureWave>,
}

impl IrisTexture {
    pub fn for_identity(identity: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(identity ^ 0x1a2b_3c4d_5e6f_7081);
        let waves = (0..8)
            .map(|_| TextureWave {
                amplitude: rng.random_range(4.0..10.0),
                radial: rng.random_range(0.5..3.0),
                angular: rng.random_range(1..=20) * if rng.random_bool(0.5) { 1 } else { -1 },
                phase: rng.random_range(0.0..TAU),
            })
            .collect();
        IrisTexture { waves }
    }

    /// Texture offset at normalized radius `rho` and angle `phi`.
    pub fn value(&self, rho: f64, phi: f64) -> f64 {
        self.waves
            .iter()
            .map(|w| (TAU * w.radial * rho + w.angular as f64 * phi + w.phase).cos() * w.amplitude)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub width: usize,
    pub height: usize,
    pub pupil: CircleParams,
    pub limbus: CircleParams,
    pub identity: u64,
    /// Counter-clockwise eye rotation in radians.
    pub rotation: f64,
    /// Standard deviation of additive Gaussian noise, in gray levels.
    pub noise_std: f64,
    /// Rows above this are covered by the upper eyelid.
    pub eyelid_row: Option<f64>,
    pub pupil_level: f64,
    pub iris_level: f64,
    pub sclera_level: f64,
    pub eyelid_level: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            width: 256,
            height: 256,
            pupil: CircleParams::new(128.0, 128.0, 40.0),
            limbus: CircleParams::new(128.0, 128.0, 100.0),
            identity: 0,
            rotation: 0.0,
            noise_std: 3.0,
            eyelid_row: None,
            pupil_level: 30.0,
            iris_level: 110.0,
            sclera_level: 190.0,
            eyelid_level: 150.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEye {
    /// Carries the eyelid mask.
    pub image: EyeImage,
    pub truth: Segmentation,
}

/// Distance from the pupil center to the limbus along direction `phi`.
fn limbus_reach(seg: &Segmentation, phi: f64) -> f64 {
    let (ux, uy) = (phi.cos(), -phi.sin());
    let (dx, dy) = (seg.pupil.x0 - seg.limbus.x0, seg.pupil.y0 - seg.limbus.y0);
    let b = ux * dx + uy * dy;
    let c = dx * dx + dy * dy - seg.limbus.r * seg.limbus.r;
    -b + (b * b - c).max(0.0).sqrt()
}

/// Renders a textured eye. `seed` drives the sensor noise only; the texture
/// depends on `params.identity`.
pub fn synth_iris(seed: u64, params: &SynthParams) -> Result<SyntheticEye> {
    let truth = Segmentation::new(params.pupil, params.limbus)?;
    let l = &params.limbus;
    if l.x0 - l.r < 0.0
        || l.y0 - l.r < 0.0
        || l.x0 + l.r > (params.width - 1) as f64
        || l.y0 + l.r > (params.height - 1) as f64
    {
        return Err(Error::CircleOutOfBounds {
            x0: l.x0,
            y0: l.y0,
            r: l.r,
        });
    }
    if !(params.noise_std >= 0.0) {
        return Err(Error::Contract("noise_std must be >= 0".into()));
    }
    let texture = IrisTexture::for_identity(params.identity);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, params.noise_std).expect("checked std");
    let (w, h) = (params.width, params.height);
    let mut pixels = Vec::with_capacity(w * h);
    let mut mask = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let lid = params.eyelid_row.is_some_and(|row| yf < row);
            let base = if lid {
                params.eyelid_level
            } else if truth.pupil.contains(xf, yf) {
                params.pupil_level
            } else if truth.limbus.contains(xf, yf) {
                let phi = (params.pupil.y0 - yf).atan2(xf - params.pupil.x0);
                let d = (xf - params.pupil.x0).hypot(yf - params.pupil.y0);
                let reach = limbus_reach(&truth, phi);
                let rho = ((d - params.pupil.r) / (reach - params.pupil.r)).clamp(0.0, 1.0);
                params.iris_level + texture.value(rho, phi - params.rotation)
            } else {
                params.sclera_level
            };
            let v = base + noise.sample(&mut rng);
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
            mask.push(!lid);
        }
    }
    let image = EyeImage::new(w, h, pixels)?.with_mask(mask)?;
    Ok(SyntheticEye { image, truth })
}

/// Capture conditions for image `sample` of `identity` in a synthetic
/// corpus: the limbus size is fixed per identity; position, pupil dilation,
/// rotation (within ±`max_rotation` radians), noise and eyelid vary per
/// image.
pub fn corpus_params(identity: u64, sample: u64, seed: u64, max_rotation: f64) -> SynthParams {
    let mut id_rng = ChaCha8Rng::seed_from_u64(seed ^ identity.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let limbus_r = id_rng.random_range(95.0..108.0f64).round();
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ identity.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (sample + 1).wrapping_mul(0xc2b2_ae3d_27d4_eb4f),
    );
    let cx = 128.0 + rng.random_range(-6i32..=6) as f64;
    let cy = 128.0 + rng.random_range(-6i32..=6) as f64;
    let pupil_r = rng.random_range(30i32..=48) as f64;
    let px = cx + rng.random_range(-2i32..=2) as f64;
    let py = cy + rng.random_range(-2i32..=2) as f64;
    let rotation = if max_rotation > 0.0 {
        rng.random_range(-max_rotation..=max_rotation)
    } else {
        0.0
    };
    let noise_std = rng.random_range(2.0..6.0);
    let eyelid_row = rng
        .random_bool(0.3)
        .then(|| cy - limbus_r + rng.random_range(5.0..25.0));
    SynthParams {
        pupil: CircleParams::new(px, py, pupil_r),
        limbus: CircleParams::new(cx, cy, limbus_r),
        identity,
        rotation,
        noise_std,
        eyelid_row,
        ..Default::default()
    }
}
