//! Named-array checkpoint archive.
//!
//! Layout: 4-byte magic `SNTA`, u32 version, u64 header length, JSON
//! header (array manifest in data order plus free-form metadata), then
//! the raw f64 little-endian payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::graph::Arr;
use crate::params::ParamSet;

const MAGIC: &[u8; 4] = b"SNTA";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("header error: {0}")]
    Header(#[from] serde_json::Error),
    #[error("archive is missing parameter {0}")]
    MissingParam(String),
    #[error("shape mismatch for {name}: archive {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, found: Vec<usize>, expected: Vec<usize> },
}

#[derive(Serialize, Deserialize)]
struct Header {
    arrays: Vec<ArrayDesc>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ArrayDesc {
    name: String,
    shape: Vec<usize>,
}

pub fn save<'a>(
    path: &Path,
    arrays: impl Iterator<Item = (&'a str, &'a Arr)>,
    meta: serde_json::Value,
) -> Result<(), CheckpointError> {
    let arrays: Vec<(&str, &Arr)> = arrays.collect();
    let header = Header {
        arrays: arrays
            .iter()
            .map(|(n, a)| ArrayDesc { name: n.to_string(), shape: a.shape().to_vec() })
            .collect(),
        meta,
    };
    let hbytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u64::<LittleEndian>(hbytes.len() as u64)?;
    w.write_all(&hbytes)?;
    for (_, a) in &arrays {
        for v in a.iter() {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Vec<(String, Arr)>, serde_json::Value), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Malformed("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(CheckpointError::Malformed(format!("unsupported version {version}")));
    }
    let hlen = r.read_u64::<LittleEndian>()? as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes)?;
    let header: Header = serde_json::from_slice(&hbytes)?;
    let mut out = Vec::with_capacity(header.arrays.len());
    for desc in header.arrays {
        let len: usize = desc.shape.iter().product();
        let mut data = vec![0f64; len];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        let arr = Arr::from_shape_vec(IxDyn(&desc.shape), data)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        out.push((desc.name, arr));
    }
    Ok((out, header.meta))
}

/// Saves every parameter in the set, in insertion order.
pub fn save_params(path: &Path, params: &ParamSet, meta: serde_json::Value) -> Result<(), CheckpointError> {
    save(path, params.iter().map(|(_, e)| (e.name.as_str(), &e.value)), meta)
}

/// Restores parameters by name; every parameter in `params` must be
/// present with a matching shape. Returns the archive metadata.
pub fn load_params(path: &Path, params: &mut ParamSet) -> Result<serde_json::Value, CheckpointError> {
    let (arrays, meta) = load(path)?;
    let by_name: std::collections::HashMap<String, Arr> = arrays.into_iter().collect();
    for id in params.ids().collect::<Vec<_>>() {
        let name = params.name(id).to_string();
        let arr = by_name
            .get(&name)
            .ok_or_else(|| CheckpointError::MissingParam(name.clone()))?;
        if arr.shape() != params.value(id).shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                found: arr.shape().to_vec(),
                expected: params.value(id).shape().to_vec(),
            });
        }
        params.value_mut(id).assign(arr);
    }
    Ok(meta)
}
