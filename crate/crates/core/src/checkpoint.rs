//! Model checkpoints.
//!
//! Layout: the 8-byte magic `UDTNCKPT`, a little-endian `u32` format version,
//! a `u64` header length, the JSON header (config, seed, dtype, parameter
//! names and shapes) and then every parameter's values as raw little-endian
//! floats in declaration order. Loading rebuilds the layout from the stored
//! config and checks names and shapes before copying values, so a round trip
//! is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::{ModelConfig, SegModel};
use crate::tensor::Element;

pub const MAGIC: &[u8; 8] = b"UDTNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub dtype: String,
    pub seed: u64,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
}

pub fn to_bytes<T: Element>(model: &SegModel<T>) -> Result<Vec<u8>> {
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        seed: model.seed,
        config: model.config.clone(),
        params: model
            .params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + model.param_count() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params.iter() {
        p.tensor.data().iter().for_each(|v| v.write_le(&mut out));
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    let mut pos = 0;
    if take(bytes, &mut pos, 8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(take(bytes, &mut pos, 8, "header length")?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let header: Header = serde_json::from_slice(take(bytes, &mut pos, len, "header")?)?;
    if header.format_version != version {
        return Err(Error::Checkpoint("header version disagrees with preamble".into()));
    }
    Ok((header, pos))
}

pub fn from_bytes<T: Element>(bytes: &[u8]) -> Result<SegModel<T>> {
    let (header, mut pos) = read_header(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} values, requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    let mut model = SegModel::<T>::build(header.config.clone(), header.seed)?;
    if model.params.len() != header.params.len() {
        return Err(Error::Checkpoint(format!(
            "config builds {} parameters, checkpoint lists {}",
            model.params.len(),
            header.params.len()
        )));
    }
    let ids: Vec<_> = model.params.ids().collect();
    for (id, entry) in ids.into_iter().zip(&header.params) {
        let t = model.params.get(id);
        if model.params.name(id) != entry.name || t.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: expected {} {:?}, found {} {:?}",
                model.params.name(id),
                t.shape(),
                entry.name,
                entry.shape
            )));
        }
        let n = t.numel();
        let raw = take(bytes, &mut pos, n * T::BYTES, &entry.name)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        model.params.set(id, data)?;
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(model)
}

pub fn save<T: Element>(model: &SegModel<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load<T: Element>(path: &Path) -> Result<SegModel<T>> {
    let bytes = fs::read(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    from_bytes(&bytes).map_err(|e| e.context(format!("loading {}", path.display())))
}
