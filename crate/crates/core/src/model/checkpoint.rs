//! Binary tensor container used for checkpoints and exported directions.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "ARITHLM\0"
//! version    u32
//! header_len u32, then header_len bytes of UTF-8 JSON
//! count      u32
//! count × { name_len u32, name bytes, ndim u32, ndim × u64 extents,
//!           numel × f32 values }
//! ```

use super::{Model, ModelConfig};
use crate::error::{ArithError, Result};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ARITHLM\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: Option<ModelConfig>,
    pub seed: u64,
    pub epoch: usize,
    /// Free-form metadata (task, split, preset name).
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_tensor_file<W: Write>(mut w: W, file: &TensorFile) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&file.header)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(file.tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &file.tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor_file<R: Read>(mut r: R) -> Result<TensorFile> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ArithError::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(ArithError::Format(format!("unsupported format version {version}")));
    }
    let hlen = read_u32(&mut r)? as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    let header: CheckpointHeader = serde_json::from_slice(&hbuf)?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = read_u32(&mut r)? as usize;
        let mut nbuf = vec![0u8; nlen];
        r.read_exact(&mut nbuf)?;
        let name = String::from_utf8(nbuf).map_err(|e| ArithError::Format(e.to_string()))?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim).map(|_| read_u64(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(TensorFile { header, tensors })
}

impl<T: Scalar> Model<T> {
    pub fn to_tensor_file(&self, seed: u64, epoch: usize, meta: serde_json::Value) -> TensorFile {
        TensorFile {
            header: CheckpointHeader {
                format_version: CHECKPOINT_VERSION,
                config: Some(self.config.clone()),
                seed,
                epoch,
                meta,
            },
            tensors: self.names.iter().cloned().zip(self.params.iter().map(Tensor::cast)).collect(),
        }
    }

    pub fn save(&self, path: &Path, seed: u64, epoch: usize, meta: serde_json::Value) -> Result<()> {
        let f = std::fs::File::create(path)?;
        write_tensor_file(std::io::BufWriter::new(f), &self.to_tensor_file(seed, epoch, meta))
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let config = file
            .header
            .config
            .clone()
            .ok_or_else(|| ArithError::Format("checkpoint has no model config".into()))?;
        let mut model = Model::build(config, &mut RngState::new(file.header.seed))?;
        model.load_params(&file.tensors)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let f = std::fs::File::open(path)?;
        let file = read_tensor_file(std::io::BufReader::new(f))?;
        Ok((Self::from_tensor_file(&file)?, file.header))
    }
}
