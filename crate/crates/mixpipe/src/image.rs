//! RGB image buffer plus binary P6 pixmap I/O.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

/// Dense RGB image, row-major, channel-last, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::InvalidInput(format!(
                "image data length {} does not match {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput(
                "image values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let base = (y * self.width + x) * 3;
        [self.data[base], self.data[base + 1], self.data[base + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let base = (y * self.width + x) * 3;
        self.data[base..base + 3].copy_from_slice(&rgb);
    }

    /// Copy of the axis-aligned sub-rectangle `(x, y, w, h)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::InvalidInput(format!(
                "crop ({x},{y},{w},{h}) exceeds image {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(Self { height: h, width: w, data })
    }
}

/// Writes a binary P6 pixmap (maxval 255).
pub fn write_p6(img: &ImageTensor, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    write!(file, "P6\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    file.write_all(&bytes)?;
    Ok(())
}

/// Reads a binary P6 pixmap with maxval 255. Comments (`#`) in the header
/// are accepted per the PPM spec.
pub fn read_p6(path: &Path) -> Result<ImageTensor> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut pos = 0usize;

    let magic = next_token(&raw, &mut pos)
        .ok_or_else(|| Error::Parse("missing P6 magic".into()))?;
    if magic != b"P6" {
        return Err(Error::Parse("not a binary P6 pixmap".into()));
    }
    let width = parse_header_int(&raw, &mut pos, "width")?;
    let height = parse_header_int(&raw, &mut pos, "height")?;
    let maxval = parse_header_int(&raw, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Parse(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from pixel data
    pos += 1;
    let expect = width * height * 3;
    if raw.len() < pos + expect {
        return Err(Error::Parse(format!(
            "pixmap truncated: expected {} pixel bytes, found {}",
            expect,
            raw.len().saturating_sub(pos)
        )));
    }
    let data: Vec<f64> = raw[pos..pos + expect]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    ImageTensor::new(height, width, data)
}

fn next_token<'a>(raw: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < raw.len() && raw[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < raw.len() && raw[*pos] == b'#' {
            while *pos < raw.len() && raw[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    if *pos >= raw.len() {
        return None;
    }
    let start = *pos;
    while *pos < raw.len() && !raw[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Some(&raw[start..*pos])
}

fn parse_header_int(raw: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = next_token(raw, pos)
        .ok_or_else(|| Error::Parse(format!("missing pixmap {what}")))?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse(format!("bad pixmap {what}")))
}
