//! Binary PPM (P6, maxval 255) input and pixel normalization.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor, MFTN_MAGIC};

/// Pixel `p` in `[0, 255]` maps to `(p - 127.5) / 128`.
pub const NORMALIZATION: &str = "(p - 127.5) / 128";

pub fn normalize_pixel(p: u8) -> f32 {
    (p as f32 - 127.5) / 128.0
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB rows.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    /// `(1, 3, h, w)` planar tensor of normalized pixels.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (h, w) = (self.height, self.width);
        let plane = h * w;
        Tensor::from_fn(Shape::new(1, 3, h, w), |i| {
            let (c, pos) = (i / plane, i % plane);
            normalize_pixel(self.pixels[pos * 3 + c])
        })
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

fn header_token(data: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PPM header".into()));
    }
    Ok(String::from_utf8_lossy(&data[start..*pos]).into_owned())
}

pub fn parse_ppm(data: &[u8]) -> Result<RgbImage> {
    let mut pos = 0;
    if header_token(data, &mut pos)? != "P6" {
        return Err(Error::Format("not a binary PPM (P6) image".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = header_token(data, &mut pos)?;
        t.parse()
            .map_err(|_| Error::Format(format!("PPM {what} {t:?} is not a number")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("PPM maxval {maxval} unsupported (only 255)")));
    }
    // exactly one whitespace byte separates the header from the raster
    let body = pos + 1;
    let need = width * height * 3;
    if data.len() < body + need {
        return Err(Error::Format(format!(
            "PPM raster truncated: {} of {need} bytes",
            data.len().saturating_sub(body)
        )));
    }
    Ok(RgbImage {
        width,
        height,
        pixels: data[body..body + need].to_vec(),
    })
}

/// Loads a PPM or an already-normalized MFTN tensor of shape `(1, 3, h, w)`
/// and checks the spatial size. Images are never resized.
pub fn load_input(path: &Path, expected_hw: (usize, usize)) -> Result<Tensor<f32>> {
    let data = fs::read(path)?;
    let t = if data.starts_with(MFTN_MAGIC) {
        Tensor::read_mftn(&data[..])?
    } else {
        parse_ppm(&data)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
            .to_tensor()
    };
    let s = t.shape();
    let (h, w) = expected_hw;
    if (s.n, s.c, s.h, s.w) != (1, 3, h, w) {
        return Err(Error::Shape(format!(
            "{}: image is {}x{} with {} channel(s), network expects 3x{h}x{w}",
            path.display(),
            s.h,
            s.w,
            s.c
        )));
    }
    Ok(t)
}
