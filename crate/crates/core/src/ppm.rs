//! Binary PPM (P6) images with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    /// Parses a P6 file. Header tokens may be separated by any whitespace and
    /// `#` comments; samples with maxval < 255 are rescaled to 0..=255.
    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(_) => break,
                    None => return Err(Error::Data("truncated PPM header".into())),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
                pos += 1;
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P6" {
            return Err(Error::Data("not a binary PPM (P6) file".into()));
        }
        let mut number = |what: &str| -> Result<usize> {
            let t = token()?;
            t.parse().map_err(|_| Error::Data(format!("bad PPM {what} '{t}'")))
        };
        let width = number("width")?;
        let height = number("height")?;
        let maxval = number("maxval")?;
        if maxval == 0 || maxval > 255 {
            return Err(Error::Data(format!("unsupported PPM maxval {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        let start = pos + 1;
        let len = width * height * 3;
        let raster = bytes
            .get(start..start + len)
            .ok_or_else(|| Error::Data("truncated PPM raster".into()))?;
        let data = if maxval == 255 {
            raster.to_vec()
        } else {
            raster
                .iter()
                .map(|v| ((*v as usize * 255 + maxval / 2) / maxval) as u8)
                .collect()
        };
        Ok(Self { width, height, data })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes)
    }
}

/// Maps a `[0, 1]` intensity to a byte, clamping out-of-range values.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
