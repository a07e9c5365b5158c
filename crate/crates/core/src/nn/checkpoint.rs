//! Little-endian binary checkpoint:
//!
//! ```text
//! magic   8 bytes  "TNNCKPT\0"
//! version u32      1
//! count   u32      number of parameters
//! then per parameter:
//!   name_len u32, name (UTF-8), rank u32, dims u64 x rank, values f64 x prod(dims)
//! ```
//!
//! Optimizer moments and the step counter are not stored.

use std::io::{Read, Write};

use super::{NnError, ParamStore};

pub const MAGIC: &[u8; 8] = b"TNNCKPT\0";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<(), NnError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.params.len() as u32).to_le_bytes())?;
    for p in &store.params {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for d in &p.shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in &p.value {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn checkpoint_bytes(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(store, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NnError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// A parameter as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<StoredParam>, NnError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| NnError::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        out.push(StoredParam {
            name,
            shape,
            values,
        });
    }
    Ok(out)
}

/// Overwrites the values of `store` from a checkpoint whose names and
/// shapes must match exactly, in order.
pub fn load_checkpoint<R: Read>(store: &mut ParamStore, r: R) -> Result<(), NnError> {
    let stored = read_checkpoint(r)?;
    if stored.len() != store.params.len() {
        return Err(NnError::ArchitectureMismatch(format!(
            "checkpoint has {} parameters, model has {}",
            stored.len(),
            store.params.len()
        )));
    }
    for (p, s) in store.params.iter().zip(&stored) {
        if p.name != s.name || p.shape != s.shape {
            return Err(NnError::ArchitectureMismatch(format!(
                "model parameter {} {:?} vs checkpoint {} {:?}",
                p.name, p.shape, s.name, s.shape
            )));
        }
    }
    for (p, s) in store.params.iter_mut().zip(stored) {
        p.value = s.values;
    }
    Ok(())
}
