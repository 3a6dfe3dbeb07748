//! Binary PPM (P6) images and PGM (P5) label maps, 8 bits per sample.
//!
//! Images are scaled to `[0,1]` on load and rounded back to bytes on save.
//! Label bytes are class indices as-is, so 255 stays the ignore index.

use std::fmt;
use std::path::Path;

use fcan_core::data::LabelMap;
use fcan_core::Tensor;

use crate::error::{AppError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodecError {
    pub offset: usize,
    pub msg: String,
}

impl fmt::Display for CodecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "byte {}: {}", self.offset, self.msg)
    }
}

impl std::error::Error for CodecError {}

fn err<T>(offset: usize, msg: impl Into<String>) -> Result<T, CodecError> {
    Err(CodecError {
        offset,
        msg: msg.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    /// Offset of the first payload byte.
    pub data_offset: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, CodecError> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return match self.bytes.get(start) {
                None => err(start, format!("header ends before {what}")),
                Some(_) => err(start, format!("expected {what}")),
            };
        }
        let digits = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap_or_default();
        match digits.parse::<usize>() {
            Ok(v) => Ok(v),
            Err(_) => err(start, format!("{what} out of range")),
        }
    }
}

pub fn parse_header(bytes: &[u8]) -> Result<Header, CodecError> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return err(0, "expected magic P6 or P5"),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    if !bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return err(2, "expected whitespace after magic");
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    cur.skip_space();
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return err(maxval_at, format!("degenerate size {width}x{height}"));
    }
    if maxval != 255 {
        return err(maxval_at, format!("maxval {maxval} unsupported, need 255"));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        Some(_) => return err(cur.pos, "expected whitespace after maxval"),
        None => return err(cur.pos, "header ends before payload"),
    }
    Ok(Header {
        channels,
        width,
        height,
        data_offset: cur.pos + 1,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header) -> Result<&'a [u8], CodecError> {
    let need = header.width * header.height * header.channels;
    let data = &bytes[header.data_offset..];
    if data.len() < need {
        return err(
            bytes.len(),
            format!("payload truncated, {} of {need} bytes present", data.len()),
        );
    }
    if data.len() > need {
        return err(header.data_offset + need, "trailing bytes after payload");
    }
    Ok(data)
}

fn header_bytes(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[3,H,W]` image with values in `[0,1]` (clamped).
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>, CodecError> {
    let &[3, h, w] = image.shape() else {
        return err(0, format!("expected a [3,H,W] image, got {:?}", image.shape()));
    };
    let mut out = header_bytes("P6", w, h);
    let data = image.data();
    let plane = h * w;
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(to_byte(data[c * plane + i]));
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor, CodecError> {
    let header = parse_header(bytes)?;
    if header.channels != 3 {
        return err(0, "expected a P6 image");
    }
    let data = payload(bytes, &header)?;
    let plane = header.width * header.height;
    let mut out = vec![0.0; 3 * plane];
    for (i, px) in data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + i] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::new([3, header.height, header.width], out).map_err(|e| CodecError {
        offset: 0,
        msg: e.to_string(),
    })
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = header_bytes("P5", labels.width(), labels.height());
    out.extend_from_slice(labels.data());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap, CodecError> {
    let header = parse_header(bytes)?;
    if header.channels != 1 {
        return err(0, "expected a P5 label map");
    }
    let data = payload(bytes, &header)?;
    LabelMap::new(header.height, header.width, data.to_vec()).map_err(|e| CodecError {
        offset: 0,
        msg: e.to_string(),
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| AppError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}

fn at(path: &Path) -> impl FnOnce(CodecError) -> AppError + '_ {
    move |e| AppError::format(path, e.to_string())
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    decode_ppm(&read(path)?).map_err(at(path))
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    write(path, &encode_ppm(image).map_err(at(path))?)
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    decode_pgm(&read(path)?).map_err(at(path))
}

pub fn save_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    write(path, &encode_pgm(labels))
}
