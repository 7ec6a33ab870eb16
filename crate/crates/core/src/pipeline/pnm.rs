//! Binary PPM (P6) frames and PGM (P5) label masks, 8-bit only.

use std::path::Path;

use crate::decoder::LabelMask;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::dim(format!(
                "{} bytes for a {width}×{height} RGB image",
                data.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    /// `[3×H×W]` planes scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            f64::from(self.data[(i % plane) * 3 + i / plane]) / 255.0
        })
    }

    /// Mirror left to right.
    pub fn flipped(&self) -> RgbImage {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(self.width * 3) {
            for px in row.chunks_exact(3).rev() {
                data.extend_from_slice(px);
            }
        }
        RgbImage { data, ..*self }
    }
}

impl LabelMask {
    pub fn flipped(&self) -> LabelMask {
        let mut labels = Vec::with_capacity(self.labels.len());
        for row in self.labels.chunks_exact(self.width) {
            labels.extend(row.iter().rev());
        }
        LabelMask { labels, ..*self }
    }
}

struct Header {
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            path,
            format!("expected {} header", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "malformed header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(path, "malformed header"));
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(path, "empty image"));
    }
    Ok(Header {
        width,
        height,
        offset: pos + 1,
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, header: String, body: &[u8]) -> Result<()> {
    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(body);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = read(path)?;
    let h = parse_header(&bytes, b"P6", path)?;
    let n = 3 * h.width * h.height;
    let body = bytes
        .get(h.offset..h.offset + n)
        .ok_or_else(|| Error::format(path, "truncated pixel data"))?;
    RgbImage::new(h.width, h.height, body.to_vec())
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    write(
        path,
        format!("P6\n{} {}\n255\n", img.width, img.height),
        &img.data,
    )
}

pub fn read_pgm(path: &Path) -> Result<LabelMask> {
    let bytes = read(path)?;
    let h = parse_header(&bytes, b"P5", path)?;
    let n = h.width * h.height;
    let body = bytes
        .get(h.offset..h.offset + n)
        .ok_or_else(|| Error::format(path, "truncated pixel data"))?;
    LabelMask::new(h.height, h.width, body.to_vec())
}

pub fn write_pgm(path: &Path, mask: &LabelMask) -> Result<()> {
    write(
        path,
        format!("P5\n{} {}\n255\n", mask.width, mask.height),
        &mask.labels,
    )
}
