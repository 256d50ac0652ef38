//! Gabor-phase iris templates and shift-minimized Hamming matching.

use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iris::{NormalizedIris, POLAR_COLS, POLAR_ROWS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaborFilter {
    /// Wavelength in polar pixels.
    pub wavelength: f64,
    /// Carrier direction in radians; 0 modulates along the angular axis.
    pub orientation: f64,
    pub sigma_col: f64,
    pub sigma_row: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaborBank {
    pub filters: Vec<GaborFilter>,
    /// Fraction of the largest possible response amplitude below which a
    /// location's bits are masked.
    pub amplitude_threshold: f64,
}

impl Default for GaborBank {
    fn default() -> Self {
        GaborBank {
            filters: vec![GaborFilter {
                wavelength: 24.0,
                orientation: 0.0,
                sigma_col: 5.0,
                sigma_row: 2.0,
            }],
            amplitude_threshold: 1e-3,
        }
    }
}

/// Complex kernel sampled on `(2·half_rows+1) × (2·half_cols+1)` taps.
#[derive(Debug, Clone)]
struct Kernel {
    half_rows: usize,
    half_cols: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

#[cfg(test)]
impl Kernel {
    fn taps(&self) -> usize {
        self.re.len()
    }
}

impl GaborFilter {
    /// Tap half-extents: `ceil(1.5σ)` on each axis.
    pub fn half_extent(&self) -> (usize, usize) {
        (
            (1.5 * self.sigma_row).ceil() as usize,
            (1.5 * self.sigma_col).ceil() as usize,
        )
    }

    fn kernel(&self) -> Kernel {
        let (hr, hc) = self.half_extent();
        let (s, c) = self.orientation.sin_cos();
        let mut env = Vec::new();
        let mut re = Vec::new();
        let mut im = Vec::new();
        for dr in -(hr as i64)..=hr as i64 {
            for dc in -(hc as i64)..=hc as i64 {
                let (x, y) = (dc as f64, dr as f64);
                let g = (-x * x / (2.0 * self.sigma_col.powi(2))
                    - y * y / (2.0 * self.sigma_row.powi(2)))
                .exp();
                let phase = TAU / self.wavelength * (x * c + y * s);
                env.push(g);
                re.push(g * phase.cos());
                im.push(g * phase.sin());
            }
        }
        // Remove the DC response of the even part.
        let dc = re.iter().sum::<f64>() / env.iter().sum::<f64>();
        for (r, g) in re.iter_mut().zip(&env) {
            *r -= dc * g;
        }
        Kernel {
            half_rows: hr,
            half_cols: hc,
            re,
            im,
        }
    }
}

impl GaborBank {
    /// Tunable parameters: four per filter plus the amplitude threshold.
    pub fn param_count(&self) -> usize {
        4 * self.filters.len() + 1
    }

    fn validate(&self) -> Result<()> {
        if self.filters.is_empty() {
            return Err(Error::Contract("Gabor bank has no filters".into()));
        }
        for f in &self.filters {
            if !(f.wavelength > 0.0 && f.sigma_col > 0.0 && f.sigma_row > 0.0) {
                return Err(Error::Contract(format!("bad Gabor filter {f:?}")));
            }
        }
        if !(self.amplitude_threshold >= 0.0) {
            return Err(Error::Contract("amplitude threshold must be >= 0".into()));
        }
        Ok(())
    }
}

/// Probe locations on the polar image: `rows × cols`, evenly spaced and
/// centered in their cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeGrid {
    pub rows: usize,
    pub cols: usize,
}

impl Default for ProbeGrid {
    fn default() -> Self {
        ProbeGrid { rows: 8, cols: 128 }
    }
}

impl ProbeGrid {
    fn validate(&self) -> Result<()> {
        if self.rows == 0
            || self.cols == 0
            || POLAR_ROWS % self.rows != 0
            || POLAR_COLS % self.cols != 0
        {
            return Err(Error::Contract(format!(
                "probe grid {}x{} must evenly divide {POLAR_ROWS}x{POLAR_COLS}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    pub fn row_center(&self, i: usize) -> usize {
        let step = POLAR_ROWS / self.rows;
        i * step + step / 2
    }

    pub fn col_center(&self, j: usize) -> usize {
        let step = POLAR_COLS / self.cols;
        j * step + step / 2
    }
}

/// Two phase bits per probed location and filter, with a validity mask.
/// Bit `((scale·rows + row)·cols + col)·2 + b` holds the sign of the real
/// (`b = 0`) or imaginary (`b = 1`) response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IrisTemplate {
    pub rows: usize,
    pub cols: usize,
    pub scales: usize,
    pub code: Vec<bool>,
    pub mask: Vec<bool>,
}

impl IrisTemplate {
    pub fn new(
        rows: usize,
        cols: usize,
        scales: usize,
        code: Vec<bool>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let n = 2 * rows * cols * scales;
        if n == 0 || code.len() != n || mask.len() != n {
            return Err(Error::Shape(format!(
                "{rows}x{cols}x{scales} template needs {n} code and mask bits, got {} and {}",
                code.len(),
                mask.len()
            )));
        }
        Ok(IrisTemplate {
            rows,
            cols,
            scales,
            code,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.code.len()
    }

    pub fn is_empty(&self) -> bool {
        self.code.is_empty()
    }

    #[inline]
    fn index(&self, band: usize, col: usize, b: usize) -> usize {
        (band * self.cols + col) * 2 + b
    }

    /// Circularly shifts the columns: `out[col] = self[col − s]`.
    pub fn shifted(&self, s: i64) -> IrisTemplate {
        let mut out = self.clone();
        for band in 0..self.rows * self.scales {
            for col in 0..self.cols {
                let src = (col as i64 - s).rem_euclid(self.cols as i64) as usize;
                for b in 0..2 {
                    let (i, j) = (self.index(band, col, b), self.index(band, src, b));
                    out.code[i] = self.code[j];
                    out.mask[i] = self.mask[j];
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 2 * self.len().div_ceil(8));
        for v in [self.rows, self.cols, self.scales] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend(pack_bits(&self.code));
        out.extend(pack_bits(&self.mask));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> Result<usize> {
            let b = bytes
                .get(4 * i..4 * i + 4)
                .ok_or_else(|| Error::Parse("template header truncated".into()))?;
            Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
        };
        let (rows, cols, scales) = (word(0)?, word(1)?, word(2)?);
        let n = 2usize
            .checked_mul(rows)
            .and_then(|v| v.checked_mul(cols))
            .and_then(|v| v.checked_mul(scales))
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Parse(format!("bad template geometry {rows}x{cols}x{scales}")))?;
        let nb = n.div_ceil(8);
        if bytes.len() != 12 + 2 * nb {
            return Err(Error::Parse(format!(
                "template body is {} bytes, expected {}",
                bytes.len() - 12,
                2 * nb
            )));
        }
        let code = unpack_bits(&bytes[12..12 + nb], n);
        let mask = unpack_bits(&bytes[12 + nb..], n);
        IrisTemplate::new(rows, cols, scales, code, mask)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, b) in bits.iter().enumerate() {
        if *b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

/// Complex response of `k` centered at `(row, col)`; columns wrap and rows
/// clamp to the edge.
fn respond(n: &NormalizedIris, k: &Kernel, row: usize, col: usize) -> (f64, f64) {
    let (mut re, mut im) = (0.0, 0.0);
    let mut t = 0;
    for dr in -(k.half_rows as i64)..=k.half_rows as i64 {
        let r = (row as i64 + dr).clamp(0, POLAR_ROWS as i64 - 1) as usize;
        for dc in -(k.half_cols as i64)..=k.half_cols as i64 {
            let c = (col as i64 + dc).rem_euclid(POLAR_COLS as i64) as usize;
            let v = n.get(r, c) as f64;
            re += k.re[t] * v;
            im += k.im[t] * v;
            t += 1;
        }
    }
    (re, im)
}

/// Quantizes Gabor phase at every probe. Bits are masked where the polar
/// mask is invalid at the probe or the amplitude is below the threshold.
pub fn encode(n: &NormalizedIris, bank: &GaborBank, grid: ProbeGrid) -> Result<IrisTemplate> {
    bank.validate()?;
    grid.validate()?;
    let scales = bank.filters.len();
    let len = 2 * grid.rows * grid.cols * scales;
    let mut code = vec![false; len];
    let mut mask = vec![false; len];
    for (s, f) in bank.filters.iter().enumerate() {
        let k = f.kernel();
        let max_amp = 255.0
            * k.re
                .iter()
                .zip(&k.im)
                .map(|(a, b)| a.hypot(*b))
                .sum::<f64>();
        let floor = (bank.amplitude_threshold * max_amp).powi(2);
        for i in 0..grid.rows {
            let row = grid.row_center(i);
            for j in 0..grid.cols {
                let col = grid.col_center(j);
                let (re, im) = respond(n, &k, row, col);
                let at = ((s * grid.rows + i) * grid.cols + j) * 2;
                code[at] = re > 0.0;
                code[at + 1] = im > 0.0;
                let ok = n.valid(row, col) && re * re + im * im >= floor;
                mask[at] = ok;
                mask[at + 1] = ok;
            }
        }
    }
    IrisTemplate::new(grid.rows, grid.cols, scales, code, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub hd: f64,
    pub best_shift: i64,
    pub valid_bits: usize,
}

pub const DEFAULT_MAX_SHIFT: usize = 16;

/// Fractional Hamming distance of `a[col]` against `b[col + s]`, minimized
/// over `s ∈ [−max_shift, max_shift]`. Shifts are tried as 0, −1, 1, −2, …
/// and only a strictly smaller distance replaces the incumbent.
pub fn match_templates(a: &IrisTemplate, b: &IrisTemplate, max_shift: usize) -> Result<MatchResult> {
    if (a.rows, a.cols, a.scales) != (b.rows, b.cols, b.scales) {
        return Err(Error::Shape(format!(
            "template geometry {}x{}x{} vs {}x{}x{}",
            a.rows, a.cols, a.scales, b.rows, b.cols, b.scales
        )));
    }
    let mut best: Option<MatchResult> = None;
    let order = std::iter::once(0i64)
        .chain((1..=max_shift as i64).flat_map(|s| [-s, s]));
    for s in order {
        let (mut diff, mut valid) = (0usize, 0usize);
        for band in 0..a.rows * a.scales {
            for col in 0..a.cols {
                let other = (col as i64 + s).rem_euclid(a.cols as i64) as usize;
                for bit in 0..2 {
                    let (i, j) = (a.index(band, col, bit), a.index(band, other, bit));
                    if a.mask[i] && b.mask[j] {
                        valid += 1;
                        diff += (a.code[i] != b.code[j]) as usize;
                    }
                }
            }
        }
        if valid == 0 {
            continue;
        }
        let hd = diff as f64 / valid as f64;
        if best.is_none_or(|m| hd < m.hd) {
            best = Some(MatchResult {
                hd,
                best_shift: s,
                valid_bits: valid,
            });
        }
    }
    best.ok_or_else(|| Error::Contract("no jointly valid bits at any shift".into()))
}

/// FLOPs of [`encode`]: per probe and filter, a complex multiply-accumulate
/// per tap (4 FLOPs) plus 3 for the squared amplitude test.
pub fn encode_flops(bank: &GaborBank, grid: ProbeGrid) -> u64 {
    bank.filters
        .iter()
        .map(|f| {
            let (hr, hc) = f.half_extent();
            let taps = ((2 * hr + 1) * (2 * hc + 1)) as u64;
            (grid.rows * grid.cols) as u64 * (4 * taps + 3)
        })
        .sum()
}

/// FLOPs of [`match_templates`]: per shift and bit, two mask/code logic ops,
/// a comparison and two counter increments, plus one division per shift.
pub fn match_flops(template_bits: usize, max_shift: usize) -> u64 {
    (2 * max_shift as u64 + 1) * (5 * template_bits as u64 + 1)
}
