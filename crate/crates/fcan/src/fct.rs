//! FCT1 tensor blobs: `b"FCT1"`, a dtype byte (0 = f32, 1 = f64), a rank
//! byte, `rank` little-endian u64 dims, then the row-major payload in
//! little-endian order.

use std::path::Path;

use fcan_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::netpbm::CodecError;

pub const MAGIC: &[u8; 4] = b"FCT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn encode(tensor: &Tensor, dtype: Dtype) -> Vec<u8> {
    let shape = tensor.shape();
    assert!(
        shape.len() <= u8::MAX as usize,
        "rank {} does not fit FCT1",
        shape.len()
    );
    let mut out = Vec::with_capacity(6 + 8 * shape.len() + dtype.width() * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

fn err<T>(offset: usize, msg: impl Into<String>) -> Result<T, CodecError> {
    Err(CodecError {
        offset,
        msg: msg.into(),
    })
}

/// Decodes a blob, returning the tensor and the stored dtype.
pub fn decode(bytes: &[u8]) -> Result<(Tensor, Dtype), CodecError> {
    if bytes.get(..4) != Some(MAGIC) {
        return err(0, "bad magic, expected FCT1");
    }
    let Some(&code) = bytes.get(4) else {
        return err(bytes.len(), "missing dtype");
    };
    let Some(dtype) = Dtype::from_code(code) else {
        return err(4, format!("unknown dtype code {code}"));
    };
    let Some(&rank) = bytes.get(5) else {
        return err(bytes.len(), "missing rank");
    };
    let mut pos = 6;
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let Some(raw) = bytes.get(pos..pos + 8) else {
            return err(bytes.len(), "dims truncated");
        };
        let d = u64::from_le_bytes(raw.try_into().unwrap());
        let Ok(d) = usize::try_from(d) else {
            return err(pos, "dim too large");
        };
        shape.push(d);
        pos += 8;
    }
    let Some(need) = shape
        .iter()
        .try_fold(dtype.width(), |acc: usize, &d| acc.checked_mul(d))
    else {
        return err(6, "payload size overflows");
    };
    let data = &bytes[pos..];
    if data.len() < need {
        return err(
            bytes.len(),
            format!("payload truncated, {} of {need} bytes present", data.len()),
        );
    }
    if data.len() > need {
        return err(pos + need, "trailing bytes after payload");
    }
    let values: Vec<f64> = match dtype {
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let tensor = Tensor::new(shape, values).map_err(|e| CodecError {
        offset: 6,
        msg: e.to_string(),
    })?;
    Ok((tensor, dtype))
}

pub fn save(path: &Path, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    std::fs::write(path, encode(tensor, dtype)).map_err(|e| AppError::io(path, e))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode(&bytes)
        .map(|(t, _)| t)
        .map_err(|e| AppError::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new([2, 1], vec![1.0, -2.0]).unwrap();
        let b = encode(&t, Dtype::F32);
        assert_eq!(&b[..6], b"FCT1\x00\x02");
        assert_eq!(&b[6..14], &2u64.to_le_bytes());
        assert_eq!(&b[14..22], &1u64.to_le_bytes());
        assert_eq!(&b[22..26], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 30);
    }

    #[test]
    fn rejects_unknown_dtype() {
        let e = decode(b"FCT1\x07\x00").unwrap_err();
        assert_eq!(e.offset, 4);
    }
}
