//! `GRNC` model checkpoints: magic, u16 version, u8 dtype tag, u32-prefixed
//! JSON header (model shape and run config), u32 parameter count, then per
//! parameter: u16-prefixed name, u8 decay flag, u8 rank, u32 extents and the
//! little-endian payload. Parameters appear in model construction order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::{write_atomic, Reader};
use crate::error::{Error, Result};
use crate::reasoning::{GrNet, ModelShape};
use crate::scalar::{DType, Scalar};
use crate::tensor::{ParamSet, Parameter, Tensor};

pub const MAGIC: &[u8; 4] = b"GRNC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub shape: ModelShape,
    pub config: RunConfig,
}

pub fn encode<T: Scalar>(model: &GrNet<T>, config: &RunConfig) -> Vec<u8> {
    let header = CheckpointHeader {
        shape: model.shape().clone(),
        config: config.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params().iter() {
        out.extend_from_slice(&(p.identifier.len() as u16).to_le_bytes());
        out.extend_from_slice(p.identifier.as_bytes());
        out.push(p.decay as u8);
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

fn read_header(r: &mut Reader<'_>) -> Result<(DType, CheckpointHeader)> {
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let tag = r.u8()?;
    let dtype =
        DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
    let len = r.u32()? as usize;
    let header = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    Ok((dtype, header))
}

/// Stored precision and header without decoding parameters.
pub fn peek(bytes: &[u8]) -> Result<(DType, CheckpointHeader)> {
    read_header(&mut Reader::new(bytes))
}

/// Decodes a checkpoint stored in precision `T`.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(GrNet<T>, RunConfig)> {
    let mut r = Reader::new(bytes);
    let (dtype, header) = read_header(&mut r)?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "checkpoint holds {dtype} parameters, {} requested",
            T::DTYPE
        )));
    }
    let count = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let decay = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("bad decay flag {other}"))),
        };
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let size = dtype.size();
        let data = r
            .take(numel * size)?
            .chunks_exact(size)
            .map(T::read_le)
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        params.add(Parameter::new(name, value, decay));
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
    }
    let model = GrNet::from_params(header.shape, params)?;
    Ok((model, header.config))
}

pub fn save<T: Scalar>(path: &Path, model: &GrNet<T>, config: &RunConfig) -> Result<()> {
    write_atomic(path, &encode(model, config))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(GrNet<T>, RunConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::init_params;
    use rand::SeedableRng;

    fn model<T: Scalar>() -> (GrNet<T>, RunConfig) {
        let cfg = RunConfig::from_json(
            r#"{"pyramid":"1x1,2x2","reasoning":{"layers":2,"hidden":3,"proj_dim":4},"seed":5}"#,
        )
        .unwrap();
        let mut m = GrNet::zeros(cfg.model_shape(6)).unwrap();
        init_params(m.params_mut(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(5));
        for p in m.params_mut().iter_mut().filter(|p| !p.decay) {
            p.value.data_mut()[0] = T::lit(0.123456789);
        }
        (m, cfg)
    }

    #[test]
    fn round_trip_bit_exact_both_precisions() {
        let (m, cfg) = model::<f64>();
        let (back, c2) = decode::<f64>(&encode(&m, &cfg)).unwrap();
        assert_eq!((&back, &c2), (&m, &cfg));
        let (m, cfg) = model::<f32>();
        let (back, _) = decode::<f32>(&encode(&m, &cfg)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn precision_mismatch_and_corruption() {
        let (m, cfg) = model::<f32>();
        let bytes = encode(&m, &cfg);
        assert_eq!(peek(&bytes).unwrap().0, DType::F32);
        assert!(matches!(decode::<f64>(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode::<f32>(&bytes[..bytes.len() - 2]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode::<f32>(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn atomic_save_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.grnc");
        let (m, cfg) = model::<f64>();
        save(&path, &m, &cfg).unwrap();
        save(&path, &m, &cfg).unwrap();
        let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
        assert_eq!(load::<f64>(&path).unwrap().0, m);
    }
}
