//! Parameter checkpoints: `DNSCKPT1` magic, u32 tensor count, then per tensor
//! a u16-length name, u8 rank, u32 dims, and a float32 payload. Little-endian;
//! tensors are written in name order so files are canonical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{ModelError, ModelResult};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DNSCKPT1";

pub fn checkpoint_to_bytes(tensors: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_checkpoint(
    tensors: impl IntoIterator<Item = (String, Tensor)>,
    path: impl AsRef<Path>,
) -> ModelResult<()> {
    let map: BTreeMap<String, Tensor> = tensors.into_iter().collect();
    fs::write(path, checkpoint_to_bytes(&map))?;
    Ok(())
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> ModelResult<BTreeMap<String, Tensor>> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &'static str| -> ModelResult<&[u8]> {
        if *pos + n > buf.len() {
            return Err(ModelError::Truncated(what));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8, "magic")? != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let count = u32::from_le_bytes(take(&mut pos, 4, "count")?.try_into().unwrap()) as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2, "name length")?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len, "name")?.to_vec())
            .map_err(|_| ModelError::Truncated("name"))?;
        let rank = take(&mut pos, 1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4, "dims")?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, 4 * n, "payload")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        out.insert(name, Tensor::new(shape, data)?);
    }
    if pos != buf.len() {
        return Err(ModelError::Truncated("trailing bytes"));
    }
    Ok(out)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> ModelResult<BTreeMap<String, Tensor>> {
    checkpoint_from_bytes(&fs::read(path)?)
}

/// Reads several checkpoint files into one table; later files win on
/// duplicate names.
pub fn read_checkpoints<P: AsRef<Path>>(paths: &[P]) -> ModelResult<BTreeMap<String, Tensor>> {
    let mut merged = BTreeMap::new();
    for p in paths {
        merged.extend(read_checkpoint(p)?);
    }
    Ok(merged)
}
