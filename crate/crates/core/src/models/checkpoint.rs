//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! `"MVTX"`, `version: u32`, `tensor_count: u32`, then per tensor
//! `name_len: u32`, UTF-8 name, `ndim: u32`, `dims: u64 × ndim`, and the
//! float32 little-endian data. Round-trips are bit-exact.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

use crate::nncore::{Element, ParamStore};

pub const MAGIC: [u8; 4] = *b"MVTX";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("truncated checkpoint file")]
    Truncated,
    #[error("checkpoint tensor {name:?} is not a model parameter")]
    UnknownTensor { name: String },
    #[error("model parameter {name:?} missing from checkpoint")]
    MissingTensor { name: String },
    #[error("shape mismatch for {name:?}: checkpoint {file:?} vs model {model:?}")]
    ShapeMismatch {
        name: String,
        file: Vec<usize>,
        model: Vec<usize>,
    },
    #[error("i/o error: {0}")]
    Io(io::Error),
}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    }
}

#[derive(Debug, Clone)]
pub struct RawTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Serialize every store entry, in registration order, as float32.
pub fn save<E: Element>(store: &ParamStore<E>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for entry in store.entries() {
        let name = entry.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = entry.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in entry.value.iter() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read all tensors without interpreting them.
pub fn read_raw(path: impl AsRef<Path>) -> Result<Vec<RawTensor>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::BadMagic)?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(RawTensor { name, shape, data });
    }
    Ok(tensors)
}

/// Load a checkpoint into an existing store: every checkpoint tensor must
/// match a known parameter by name and shape, and every parameter must be
/// present.
pub fn load_into<E: Element>(
    store: &mut ParamStore<E>,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    let tensors = read_raw(path)?;
    let mut seen = vec![false; store.len()];
    for t in tensors {
        let Some(id) = store.index_of(&t.name) else {
            return Err(CheckpointError::UnknownTensor { name: t.name });
        };
        let model_shape = store.value(id).shape().to_vec();
        if model_shape != t.shape {
            return Err(CheckpointError::ShapeMismatch {
                name: t.name,
                file: t.shape,
                model: model_shape,
            });
        }
        let arr = ArrayD::from_shape_vec(
            IxDyn(&t.shape),
            t.data.iter().map(|&v| E::from_f64(v as f64)).collect(),
        )
        .expect("shape/data length checked");
        store.set_value(id, arr);
        seen[id.0] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(CheckpointError::MissingTensor {
            name: store.entries()[missing].name.clone(),
        });
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
