//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "CLMCKPT\0"
//! version u32      currently 1
//! kind    u8       0 = bigram, 1 = kgram-mlp
//! hyper   4 x u64  vocab_size, context_k, embed_dim, hidden_dim
//! count   u32      number of tensors
//! tensor  repeated: name_len u32, name utf-8, ndim u32, dims u64 x ndim,
//!                   data f64 x prod(dims)
//! ```
//!
//! Loading an intact file reproduces the saved parameters bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::model::{ModelHyper, ModelKind, ModelParams, NamedTensors};
use super::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CLMCKPT\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_params(params, &mut file)?;
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, CheckpointError> {
    let bytes = std::fs::read(path)?;
    let mut cursor: &[u8] = &bytes;

    let mut magic = [0u8; 8];
    read_exact(&mut cursor, &mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Corrupt("bad magic bytes".to_string()));
    }
    let version = read_u32(&mut cursor)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let kind = match read_u8(&mut cursor)? {
        0 => ModelKind::Bigram,
        1 => ModelKind::KgramMlp,
        other => {
            return Err(CheckpointError::Corrupt(format!(
                "unknown model kind {other}"
            )));
        }
    };
    let hyper = ModelHyper {
        vocab_size: read_u64(&mut cursor)? as usize,
        context_k: read_u64(&mut cursor)? as usize,
        embed_dim: read_u64(&mut cursor)? as usize,
        hidden_dim: read_u64(&mut cursor)? as usize,
    };
    let count = read_u32(&mut cursor)? as usize;
    let mut tensors = NamedTensors::new();
    for _ in 0..count {
        let name_len = read_u32(&mut cursor)? as usize;
        if name_len > 1024 {
            return Err(CheckpointError::Corrupt("tensor name too long".to_string()));
        }
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut cursor, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not utf-8".to_string()))?;
        let ndim = read_u32(&mut cursor)? as usize;
        if ndim > 8 {
            return Err(CheckpointError::Corrupt("too many dimensions".to_string()));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut cursor)? as usize);
        }
        let len: usize = shape.iter().product();
        if len > 100_000_000 {
            return Err(CheckpointError::Corrupt("tensor too large".to_string()));
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(read_f64(&mut cursor)?);
        }
        let tensor =
            Tensor::from_vec(&shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(CheckpointError::Corrupt(format!(
                "duplicate tensor {name:?}"
            )));
        }
    }
    if !cursor.is_empty() {
        return Err(CheckpointError::Corrupt("trailing bytes".to_string()));
    }
    ModelParams::from_parts(kind, hyper, tensors)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

fn write_params<W: Write>(params: &ModelParams, w: &mut W) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let kind: u8 = match params.kind() {
        ModelKind::Bigram => 0,
        ModelKind::KgramMlp => 1,
    };
    w.write_all(&[kind])?;
    let h = params.hyper();
    for val in [h.vocab_size, h.context_k, h.embed_dim, h.hidden_dim] {
        w.write_all(&(val as u64).to_le_bytes())?;
    }
    w.write_all(&(params.tensors().len() as u32).to_le_bytes())?;
    for (name, tensor) in params.tensors() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &x in tensor.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

impl ModelParams {
    /// Serialized byte image of the parameters (the checkpoint body).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_params(self, &mut buf).expect("writing to Vec cannot fail");
        buf
    }

    /// FNV-1a hash of the checkpoint byte image; equal fingerprints mean
    /// bit-identical parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in self.to_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        hash
    }
}

fn read_exact(cursor: &mut &[u8], buf: &mut [u8]) -> Result<(), CheckpointError> {
    cursor
        .read_exact(buf)
        .map_err(|_| CheckpointError::Corrupt("unexpected end of file".to_string()))
}

fn read_u8(cursor: &mut &[u8]) -> Result<u8, CheckpointError> {
    let mut b = [0u8; 1];
    read_exact(cursor, &mut b)?;
    Ok(b[0])
}

fn read_u32(cursor: &mut &[u8]) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(cursor, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(cursor: &mut &[u8]) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    read_exact(cursor, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(cursor: &mut &[u8]) -> Result<f64, CheckpointError> {
    let mut b = [0u8; 8];
    read_exact(cursor, &mut b)?;
    Ok(f64::from_le_bytes(b))
}
