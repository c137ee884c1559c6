//! Binary checkpoint container.
//!
//! Little-endian layout, exact f64 round-trip:
//!
//! ```text
//! magic     8 bytes  "DYTCKPT1"
//! version   u32
//! cfg_len   u64, then cfg_len bytes of ModelConfig JSON
//! n_params  u64
//! per parameter:
//!   name_len u64, name bytes (utf8)
//!   trainable u8
//!   rank u8, then rank x u64 dims
//!   numel x f64 data
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{build_model, Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DYTCKPT1";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("config error: {0}")]
    Config(String),
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
}

pub fn save(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&model.cfg).map_err(|e| CheckpointError::Config(e.to_string()))?;
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&(model.set.len() as u64).to_le_bytes())?;
    for (_, p) in model.set.iter() {
        w.write_all(&(p.name.len() as u64).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&[p.trainable as u8])?;
        w.write_all(&[p.value.rank() as u8])?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rebuild the model from its stored config and overwrite every parameter
/// with the stored tensors. Unknown or missing parameters are errors.
pub fn load(path: &Path) -> Result<Model, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let cfg_len = read_u64(&mut r)? as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_buf)?;
    let cfg: ModelConfig =
        serde_json::from_slice(&cfg_buf).map_err(|e| CheckpointError::Config(e.to_string()))?;

    let mut model = build_model(&cfg, 0).map_err(CheckpointError::Config)?;
    let n = read_u64(&mut r)? as usize;
    if n != model.set.len() {
        return Err(CheckpointError::ParamMismatch(format!(
            "checkpoint has {n} parameters, model expects {}",
            model.set.len()
        )));
    }
    for _ in 0..n {
        let name_len = read_u64(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| CheckpointError::ParamMismatch("non-utf8 parameter name".into()))?;
        let mut flag = [0u8; 2];
        r.read_exact(&mut flag)?;
        let rank = flag[1] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::ParamMismatch(e.to_string()))?;
        model
            .set
            .set_by_name(&name, tensor)
            .map_err(CheckpointError::ParamMismatch)?;
    }
    Ok(model)
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
