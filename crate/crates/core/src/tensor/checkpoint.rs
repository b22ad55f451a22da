//! HTCK checkpoint format.
//!
//! Layout: magic `HTCK`, version u8 = 1, u32 parameter count; then per
//! parameter (in sorted name order): u16 name length, UTF-8 name, u8 rank,
//! rank x u32 dims, float32 little-endian payload. All multibyte integers
//! little-endian. Round-trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{ParamStore, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"HTCK";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic (not an HTCK file)")]
    BadMagic,
    #[error("unsupported HTCK version {0}")]
    Version(u8),
    #[error("truncated HTCK payload")]
    Truncated,
    #[error("malformed HTCK data: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn save<T: Real, W: Write>(store: &ParamStore<T>, mut w: W) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, tensor) in store.iter() {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(CheckpointError::Malformed(format!(
                "parameter name `{}…` too long",
                &name[..32.min(name.len())]
            )));
        }
        if tensor.rank() > u8::MAX as usize {
            return Err(CheckpointError::Malformed("tensor rank exceeds u8".into()));
        }
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[tensor.rank() as u8])?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_f32().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_to_path<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<(), CheckpointError> {
    let file = std::fs::File::create(path)?;
    let mut buf = std::io::BufWriter::new(file);
    save(store, &mut buf)?;
    buf.flush()?;
    Ok(())
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    })
}

pub fn load<R: Read>(mut r: R) -> Result<ParamStore<f32>, CheckpointError> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut version = [0u8; 1];
    read_exact_or_truncated(&mut r, &mut version)?;
    if version[0] != VERSION {
        return Err(CheckpointError::Version(version[0]));
    }
    let mut count = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut count)?;
    let count = u32::from_le_bytes(count);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let mut len = [0u8; 2];
        read_exact_or_truncated(&mut r, &mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact_or_truncated(&mut r, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        read_exact_or_truncated(&mut r, &mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut dim = [0u8; 4];
            read_exact_or_truncated(&mut r, &mut dim)?;
            shape.push(u32::from_le_bytes(dim) as usize);
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 4];
        read_exact_or_truncated(&mut r, &mut payload)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::from_vec(&shape, data)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        store
            .insert(&name, tensor)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }
    Ok(store)
}

pub fn load_from_path(path: &Path) -> Result<ParamStore<f32>, CheckpointError> {
    let file = std::fs::File::open(path)?;
    load(std::io::BufReader::new(file))
}
