//! RGB rasters with values in `[0, 1]` and binary PPM (P6) I/O.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Row-major interleaved RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height * 3],
        }
    }

    /// Mean absolute difference over all channels of equally sized images.
    pub fn mean_abs_diff(&self, other: &Raster) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        let total: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs() as f64).sum();
        total / self.data.len() as f64
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rounds every value to the nearest 8-bit level so that PPM
    /// round-trips are exact.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = quantize_unit(*v);
        }
    }

    /// Splits into non-overlapping `patch x patch` tiles, one row per tile
    /// in raster order; each row is the tile's pixels in (y, x, channel)
    /// order.
    pub fn patches(&self, patch: usize) -> Result<Array2<f64>> {
        if !self.width.is_multiple_of(patch) || !self.height.is_multiple_of(patch) {
            return Err(Error::Config(format!(
                "{}x{} image is not divisible into {patch}px patches",
                self.width, self.height
            )));
        }
        let (gw, gh) = (self.width / patch, self.height / patch);
        let cols = patch * patch * 3;
        let mut out = Array2::zeros((gw * gh, cols));
        for gy in 0..gh {
            for gx in 0..gw {
                let mut row = out.row_mut(gy * gw + gx);
                let mut j = 0;
                for py in 0..patch {
                    for px in 0..patch {
                        for c in 0..3 {
                            row[j] = self.get(gx * patch + px, gy * patch + py, c) as f64;
                            j += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse_ppm(&bytes).map_err(|m| Error::Format(format!("{}: {m}", path.display())))
    }

    fn parse_ppm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
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
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(format!("unsupported magic `{}`", fields[0]));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field `{s}`"));
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(format!("unsupported maxval {maxval}"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let n = width * height * 3;
        let body = bytes.get(pos..pos + n).ok_or("truncated raster")?;
        Ok(Self {
            width,
            height,
            data: body.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }
}

pub fn quantize_unit(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}
