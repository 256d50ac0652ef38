use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit grayscale image with an optional validity mask (true = usable).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EyeImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    mask: Option<Vec<bool>>,
}

impl EyeImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(EyeImage {
            width,
            height,
            pixels,
            mask: None,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.pixels.len() {
            return Err(Error::Shape(format!(
                "mask has {} entries for {} pixels",
                mask.len(),
                self.pixels.len()
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64
    }

    /// Bilinear intensity at `(x, y)`, clamped to the border.
    pub fn bilinear(&self, x: f64, y: f64) -> f64 {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (xc - x0 as f64, yc - y0 as f64);
        let p = |x, y| self.get(x, y) as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Adds `offset` to every pixel, saturating.
    pub fn offset(&self, offset: i32) -> EyeImage {
        let mut out = self.clone();
        for p in &mut out.pixels {
            *p = (*p as i32 + offset).clamp(0, 255) as u8;
        }
        out
    }

    /// Rotates by `angle` radians about `(cx, cy)` (counter-clockwise as
    /// seen on screen), sampling bilinearly. Pixels that come from outside
    /// the source take `fill`.
    pub fn rotated(&self, cx: f64, cy: f64, angle: f64, fill: u8) -> EyeImage {
        let (s, c) = angle.sin_cos();
        let mut pixels = vec![fill; self.pixels.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                let (dx, dy) = (x as f64 - cx, cy - y as f64);
                // Inverse rotation, in y-up coordinates.
                let sx = cx + (c * dx + s * dy);
                let sy = cy - (-s * dx + c * dy);
                if self.contains(sx, sy) {
                    pixels[y * self.width + x] = self.bilinear(sx, sy).round() as u8;
                }
            }
        }
        EyeImage {
            width: self.width,
            height: self.height,
            pixels,
            mask: None,
        }
    }
}

/// Writes a binary (P5) 8-bit PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    std::fs::write(path, encode_pgm(width, height, pixels)).map_err(|e| Error::io(path, e))
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Reads a binary (P5) PGM with maxval ≤ 255.
pub fn read_pgm(path: &Path) -> Result<EyeImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn decode_pgm(bytes: &[u8]) -> Result<EyeImage> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::Parse(format!("not a binary PGM (magic {})", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Parse(format!("bad PGM header field \"{s}\"")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse(format!("unsupported PGM maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let data = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| Error::Parse("truncated PGM raster".into()))?;
    EyeImage::new(w, h, data.to_vec())
}

/// Mask PGM: 255 valid, 0 invalid.
pub fn mask_to_pixels(mask: &[bool]) -> Vec<u8> {
    mask.iter().map(|v| if *v { 255 } else { 0 }).collect()
}

pub fn pixels_to_mask(pixels: &[u8]) -> Vec<bool> {
    pixels.iter().map(|p| *p >= 128).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_with_comment() {
        let img = EyeImage::new(3, 2, vec![0, 10, 20, 30, 40, 255]).unwrap();
        let bytes = encode_pgm(3, 2, img.pixels());
        assert_eq!(decode_pgm(&bytes).unwrap(), img);
        let mut commented = b"P5\n# made by hand\n3 2\n255\n".to_vec();
        commented.extend_from_slice(img.pixels());
        assert_eq!(decode_pgm(&commented).unwrap(), img);
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n4 4\n255\n\x00").is_err());
    }

    #[test]
    fn bilinear_interpolates_and_clamps() {
        let img = EyeImage::new(2, 2, vec![0, 100, 100, 200]).unwrap();
        assert_eq!(img.bilinear(0.5, 0.5), 100.0);
        assert_eq!(img.bilinear(1.0, 0.0), 100.0);
        assert_eq!(img.bilinear(0.25, 0.0), 25.0);
        assert_eq!(img.bilinear(-5.0, 9.0), 100.0);
    }

    #[test]
    fn quarter_turn_moves_right_to_top() {
        let mut px = vec![0u8; 25];
        px[2 * 5 + 4] = 200; // right of center
        let img = EyeImage::new(5, 5, px).unwrap();
        let r = img.rotated(2.0, 2.0, std::f64::consts::FRAC_PI_2, 0);
        assert_eq!(r.get(2, 0), 200);
        assert_eq!(r.get(4, 2), 0);
    }
}
