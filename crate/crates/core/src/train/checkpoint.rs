//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `KENN`, version `u32`, tensor count `u32`,
//! then per tensor the name length `u16`, the UTF-8 name, a dtype tag `u8`
//! (0 = f32, 1 = f64), the rank `u8`, each dimension as `u32` and the
//! row-major data. A CRC32 of everything before it closes the file.

use crate::models::{Arch, Model, ModelError, ModelKind};
use crate::nn::{ParamStore, Tensor};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"KENN";
pub const VERSION: u32 = 1;

const ARCH_KEY: &str = "meta.arch";
const KIND_KEY: &str = "meta.kind";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("truncated checkpoint: needed {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("unknown dtype tag {0}")]
    Dtype(u8),
    #[error("tensor name is not valid UTF-8")]
    Name,
    #[error("{0} unexpected bytes after the CRC")]
    Trailing(usize),
    #[error("checkpoint lacks `{0}`")]
    Missing(String),
    #[error("malformed model metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Element data of a stored tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

pub fn encode_checkpoint(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        debug_assert_eq!(t.shape.iter().product::<usize>(), t.data.len());
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(match t.data {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
        });
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &t.data {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    // bytes available to the structure, excluding the trailing CRC
    end: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.end {
            return Err(CheckpointError::Truncated {
                needed: self.pos + n + 4,
                have: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<NamedTensor>, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated {
            needed: 16,
            have: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated {
            needed: 16,
            have: bytes.len(),
        });
    }
    let mut r = Reader {
        bytes,
        pos: 4,
        end: bytes.len() - 4,
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Name)?
            .to_string();
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data = match dtype {
            0 => TensorData::F32(
                r.take(4 * n)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            1 => TensorData::F64(
                r.take(8 * n)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            t => return Err(CheckpointError::Dtype(t)),
        };
        tensors.push(NamedTensor { name, shape, data });
    }
    let stored = u32::from_le_bytes(bytes[r.end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..r.end]);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }
    if r.pos != r.end {
        return Err(CheckpointError::Trailing(r.end - r.pos));
    }
    Ok(tensors)
}

pub fn save_checkpoint(path: &Path, tensors: &[NamedTensor]) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(tensors)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<NamedTensor>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

fn arch_vector(a: &Arch) -> Vec<f64> {
    let mut v = vec![a.side as f64];
    v.extend(a.channels.iter().map(|&c| c as f64));
    v.extend(a.kernels.iter().map(|&k| k as f64));
    v.extend(a.pools.iter().map(|&p| if p { 1.0 } else { 0.0 }));
    v.extend([a.hidden as f64, a.embed as f64, a.steps as f64]);
    v
}

fn arch_from(v: &[f64]) -> Result<Arch, CheckpointError> {
    if v.len() != 13 || v.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
        return Err(CheckpointError::Meta(format!("architecture vector {v:?}")));
    }
    let u = |i: usize| v[i] as usize;
    Ok(Arch {
        side: u(0),
        channels: [u(1), u(2), u(3)],
        kernels: [u(4), u(5), u(6)],
        pools: [v[7] != 0.0, v[8] != 0.0, v[9] != 0.0],
        hidden: u(10),
        embed: u(11),
        steps: u(12),
    })
}

/// Model parameters plus the metadata needed to rebuild the model.
pub fn model_tensors(model: &Model<f32>) -> Vec<NamedTensor> {
    let mut out = vec![
        NamedTensor {
            name: KIND_KEY.into(),
            shape: vec![1],
            data: TensorData::F64(vec![model.kind().tag() as f64]),
        },
        NamedTensor {
            name: ARCH_KEY.into(),
            shape: vec![13],
            data: TensorData::F64(arch_vector(model.arch())),
        },
    ];
    for (name, t) in model.params().iter() {
        out.push(NamedTensor {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: TensorData::F32(t.data().to_vec()),
        });
    }
    out
}

pub fn model_from_tensors(tensors: Vec<NamedTensor>) -> Result<Model<f32>, CheckpointError> {
    let find = |key: &str| -> Result<Vec<f64>, CheckpointError> {
        match tensors.iter().find(|t| t.name == key).map(|t| &t.data) {
            Some(TensorData::F64(v)) => Ok(v.clone()),
            Some(_) => Err(CheckpointError::Meta(format!("`{key}` must be f64"))),
            None => Err(CheckpointError::Missing(key.to_string())),
        }
    };
    let tag = find(KIND_KEY)?;
    let kind = ModelKind::ALL
        .into_iter()
        .find(|k| tag.len() == 1 && k.tag() as f64 == tag[0])
        .ok_or_else(|| CheckpointError::Meta(format!("model kind tag {tag:?}")))?;
    let arch = arch_from(&find(ARCH_KEY)?)?;
    let mut store = ParamStore::new();
    for t in tensors {
        if t.name.starts_with("meta.") {
            continue;
        }
        let data = match t.data {
            TensorData::F32(v) => v,
            TensorData::F64(_) => {
                return Err(CheckpointError::Meta(format!(
                    "parameter `{}` must be f32",
                    t.name
                )))
            }
        };
        let tensor =
            Tensor::new(t.shape, data).map_err(|e| CheckpointError::Meta(e.to_string()))?;
        store
            .insert(&t.name, tensor)
            .map_err(|e| CheckpointError::Model(e.into()))?;
    }
    Ok(Model::from_params(kind, arch, store)?)
}

pub fn save_model(path: &Path, model: &Model<f32>) -> Result<(), CheckpointError> {
    save_checkpoint(path, &model_tensors(model))
}

pub fn load_model(path: &Path) -> Result<Model<f32>, CheckpointError> {
    model_from_tensors(load_checkpoint(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<NamedTensor> {
        vec![
            NamedTensor {
                name: "a".into(),
                shape: vec![2, 2],
                data: TensorData::F32(vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]),
            },
            NamedTensor {
                name: "b".into(),
                shape: vec![3],
                data: TensorData::F64(vec![1e-300, 2.0, -7.25]),
            },
        ]
    }

    #[test]
    fn round_trip_and_layout() {
        let bytes = encode_checkpoint(&sample());
        assert_eq!(&bytes[..4], b"KENN");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        // name length, name, dtype, rank, dims
        assert_eq!(&bytes[12..14], &1u16.to_le_bytes());
        assert_eq!(bytes[14], b'a');
        assert_eq!((bytes[15], bytes[16]), (0, 2));
        assert_eq!(decode_checkpoint(&bytes).unwrap(), sample());
    }

    #[test]
    fn damage_is_classified() {
        let bytes = encode_checkpoint(&sample());
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 7]),
            Err(CheckpointError::Truncated { .. })
        ));
        let mut flipped = bytes.clone();
        flipped[30] ^= 0x10;
        assert!(matches!(
            decode_checkpoint(&flipped),
            Err(CheckpointError::Crc { .. })
        ));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&magic),
            Err(CheckpointError::BadMagic)
        ));
        let mut version = bytes;
        version[4] = 9;
        assert!(matches!(
            decode_checkpoint(&version),
            Err(CheckpointError::Version(9))
        ));
    }
}
