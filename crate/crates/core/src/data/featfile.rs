//! `SPYR` feature-map files: magic, u16 version, u8 dtype tag, u32 C/H/W,
//! then the little-endian row-major payload.

use std::path::Path;

use super::{write_atomic, Reader};
use crate::error::{Error, Result};
use crate::pyramid::FeatureMap;
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"SPYR";
pub const VERSION: u16 = 1;

/// Serialises `map` with elements stored as `dtype`.
pub fn encode<T: Scalar>(map: &FeatureMap<T>, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(19 + map.data().len() * dtype.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.tag());
    for d in [map.channels(), map.height(), map.width()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in map.data() {
        match dtype {
            DType::F32 => (v.to_f64_lossless() as f32).write_le(&mut out),
            DType::F64 => v.to_f64_lossless().write_le(&mut out),
        }
    }
    out
}

/// Parses a feature file, converting elements to `T`. Returns the stored dtype.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(FeatureMap<T>, DType)> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a feature file (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported feature file version {version}")));
    }
    let tag = r.u8()?;
    let dtype = DType::from_tag(tag)
        .ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
    let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let n = c
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
    let expected = n * dtype.size();
    if r.remaining() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, expected {expected} for {c}x{h}x{w} {dtype}",
            r.remaining()
        )));
    }
    let payload = r.take(expected)?;
    let data: Vec<T> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|b| T::lit(f32::read_le(b) as f64))
            .collect(),
        DType::F64 => payload.chunks_exact(8).map(|b| T::lit(f64::read_le(b))).collect(),
    };
    Ok((FeatureMap::new(c, h, w, data)?, dtype))
}

pub fn write_feature_file<T: Scalar>(path: &Path, map: &FeatureMap<T>, dtype: DType) -> Result<()> {
    write_atomic(path, &encode(map, dtype))
}

pub fn read_feature_file<T: Scalar>(path: &Path) -> Result<(FeatureMap<T>, DType)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
