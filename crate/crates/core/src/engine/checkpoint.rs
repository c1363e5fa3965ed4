//! Flat parameter container.
//!
//! Layout (all integers little-endian):
//! `b"FTCK"`, version byte, `u32` entry count, then per entry
//! `u32` name length, UTF-8 name, `u32` rank, `u32` extents, `f32` values.

use std::io::{Read, Write};

use super::param::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FTCK";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(store: &ParamStore<T>, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&[CHECKPOINT_VERSION])?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&(p.value.rank() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in p.value.data() {
            out.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads every entry as `(name, tensor)` in file order.
pub fn read_checkpoint<T: Scalar, R: Read>(mut input: R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut version = [0u8; 1];
    input.read_exact(&mut version)?;
    if version[0] != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", version[0])));
    }
    let count = read_u32(&mut input)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rank = read_u32(&mut input)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut input).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            input.read_exact(&mut buf)?;
            values.push(T::of(f32::from_le_bytes(buf) as f64));
        }
        entries.push((name, Tensor::new(shape, values)?));
    }
    Ok(entries)
}

/// Overwrites the values of `store` from a checkpoint; names and shapes must match exactly.
pub fn load_into<T: Scalar, R: Read>(store: &mut ParamStore<T>, input: R) -> Result<()> {
    let entries = read_checkpoint::<T, R>(input)?;
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, tensor) in entries {
        let id = store
            .id_of(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let p = store.get_mut(id);
        if p.value.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                p.value.shape(),
                tensor.shape()
            )));
        }
        p.value = tensor;
    }
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
