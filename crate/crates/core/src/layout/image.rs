//! Grayscale rasters and binary PGM/PPM I/O.

use std::fs;
use std::path::Path;

use crate::error::{Result, TiltError};

/// Row-major grayscale raster, 0.0 = black, 1.0 = white.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width * height != pixels.len() {
            return Err(TiltError::Shape(format!(
                "{width}x{height} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    /// Fills pixels whose centers fall inside `[x0, x1) × [y0, y1)`.
    pub fn fill_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, value: f32) {
        let cx0 = (x0 - 0.5).ceil().max(0.0) as usize;
        let cy0 = (y0 - 0.5).ceil().max(0.0) as usize;
        let cx1 = ((x1 - 0.5).ceil().max(0.0) as usize).min(self.width);
        let cy1 = ((y1 - 0.5).ceil().max(0.0) as usize).min(self.height);
        for y in cy0..cy1 {
            for x in cx0..cx1 {
                self.pixels[y * self.width + x] = value;
            }
        }
    }

    /// Bilinear sample at continuous coordinates (pixel centers at +0.5);
    /// points outside the raster return `background`.
    pub fn sample_bilinear(&self, x: f64, y: f64, background: f32) -> f32 {
        let fx = x - 0.5;
        let fy = y - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = (fx - x0) as f32;
        let ty = (fy - y0) as f32;
        let px = |xi: f64, yi: f64| -> f32 {
            if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
                background
            } else {
                self.pixels[yi as usize * self.width + xi as usize]
            }
        };
        let top = px(x0, y0) * (1.0 - tx) + px(x0 + 1.0, y0) * tx;
        let bottom = px(x0, y0 + 1.0) * (1.0 - tx) + px(x0 + 1.0, y0 + 1.0) * tx;
        top * (1.0 - ty) + bottom * ty
    }

    /// Bilinear resize; edge pixels are clamped rather than blended with a background.
    pub fn resize(&self, width: usize, height: usize) -> GrayImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Vec::with_capacity(width * height);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = (fy - y0 as f64) as f32;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = (fx - x0 as f64) as f32;
                let top = self.get(x0, y0) * (1.0 - tx) + self.get(x1, y0) * tx;
                let bot = self.get(x0, y1) * (1.0 - tx) + self.get(x1, y1) * tx;
                out.push(top * (1.0 - ty) + bot * ty);
            }
        }
        GrayImage {
            width,
            height,
            pixels: out,
        }
    }

    /// Reads binary PGM (P5) or PPM (P6, luminance-converted).
    pub fn read_pnm(path: &Path) -> Result<GrayImage> {
        let bytes = fs::read(path)?;
        Self::decode_pnm(&bytes).map_err(|message| TiltError::Image {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
        let mut pos = 0usize;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let channels = match fields[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(format!("unsupported magic `{other}` (need P5 or P6)")),
        };
        let parse = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| format!("bad {what} `{s}`"))
        };
        let width = parse(&fields[1], "width")?;
        let height = parse(&fields[2], "height")?;
        let maxval = parse(&fields[3], "maxval")?;
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(format!("invalid header {width}x{height} maxval {maxval}"));
        }
        let bps = if maxval < 256 { 1 } else { 2 };
        let need = width * height * channels * bps;
        let data = bytes.get(pos..pos + need).ok_or_else(|| {
            format!(
                "raster truncated: need {need} bytes, have {}",
                bytes.len().saturating_sub(pos)
            )
        })?;
        let sample = |i: usize| -> f32 {
            let v = if bps == 1 {
                data[i] as u32
            } else {
                ((data[2 * i] as u32) << 8) | data[2 * i + 1] as u32
            };
            v as f32 / maxval as f32
        };
        let pixels = (0..width * height)
            .map(|p| {
                if channels == 1 {
                    sample(p)
                } else {
                    0.299 * sample(3 * p) + 0.587 * sample(3 * p + 1) + 0.114 * sample(3 * p + 2)
                }
            })
            .collect();
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    /// 8-bit binary PGM.
    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.pixels
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_pgm())?;
        Ok(())
    }

    /// Quantizes to 8-bit levels, matching what a PGM round trip yields.
    pub fn quantized(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self
                .pixels
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_at_8_bits() {
        let img = GrayImage::new(3, 2, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        let back = GrayImage::decode_pnm(&img.encode_pgm()).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn ppm_is_converted_by_luminance() {
        let mut bytes = b"P6\n# comment\n2 1\n255\n".to_vec();
        bytes.extend([255, 0, 0, 255, 255, 255]);
        let img = GrayImage::decode_pnm(&bytes).unwrap();
        assert!((img.get(0, 0) - 0.299).abs() < 1e-6);
        assert!((img.get(1, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn truncated_raster_is_an_error() {
        let bytes = b"P5\n4 4\n255\n\x00\x00".to_vec();
        assert!(GrayImage::decode_pnm(&bytes).unwrap_err().contains("truncated"));
        assert!(GrayImage::decode_pnm(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = GrayImage::filled(8, 6, 0.3);
        assert_eq!(img.resize(8, 6), img);
        assert!(img.resize(4, 3).pixels().iter().all(|v| (*v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn fill_rect_covers_pixel_centers() {
        let mut img = GrayImage::filled(4, 4, 1.0);
        img.fill_rect(1.0, 1.0, 3.0, 2.0, 0.0);
        let dark: Vec<_> = (0..16).filter(|i| img.pixels()[*i] == 0.0).collect();
        assert_eq!(dark, vec![5, 6]);
    }
}
