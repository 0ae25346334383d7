//! Binary PGM (P5) and PPM (P6) with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{BrauError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height * 3);
        Self {
            width,
            height,
            channels: 3,
            data,
        }
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()?
            .parse()
            .ok()
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Image, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("not a binary PGM/PPM file".into()),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number().ok_or("bad width")?;
    let height = h.number().ok_or("bad height")?;
    let maxval = h.number().ok_or("bad maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = h.pos + 1;
    let n = width * height * channels;
    let data = bytes
        .get(start..start + n)
        .ok_or_else(|| format!("raster truncated, expected {n} bytes"))?
        .to_vec();
    Ok(Image {
        width,
        height,
        channels,
        data,
    })
}

pub fn encode(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| BrauError::io(path, e))?;
    decode(&bytes).map_err(|m| BrauError::data(path, m))
}

pub fn write(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode(img)).map_err(|e| BrauError::io(path, e))
}
