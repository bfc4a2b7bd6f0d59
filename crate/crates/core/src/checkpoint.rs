//! `ARTC` named-tensor checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{format_err, Result};
use crate::io_util::{read_f32s, read_u16, read_u32, read_u8, write_f32s};
use crate::numerics::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"ARTC";
const VERSION: u16 = 1;

pub type NamedTensors = Vec<(String, Tensor<f32>)>;

pub fn write_checkpoint<W: Write>(w: &mut W, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize || t.shape().len() > u8::MAX as usize {
            return Err(format_err!("tensor `{name}` cannot be represented"));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[t.shape().len() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        write_f32s(w, t.data())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<NamedTensors> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| format_err!("checkpoint too short"))?;
    if &magic != MAGIC {
        return Err(format_err!("bad checkpoint magic {:?}", magic));
    }
    let version = read_u16(r)?;
    if version != VERSION {
        return Err(format_err!("unsupported checkpoint version {version}"));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = read_u16(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| format_err!("truncated tensor name"))?;
        let name = String::from_utf8(name).map_err(|_| format_err!("tensor name is not UTF-8"))?;
        let ndim = read_u8(r)? as usize;
        let shape = (0..ndim).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data = read_f32s(r, shape.iter().product())?;
        out.push((name.clone(), Tensor::new(shape, data).map_err(|_| format_err!("bad shape for `{name}`"))?));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, tensors)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NamedTensors> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut &bytes[..])
}

/// Store contents with every name prefixed by `prefix`.
pub fn prefixed(store: &ParamStore<f32>, prefix: &str) -> NamedTensors {
    store.to_named().into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)).collect()
}

/// Entries under `prefix`, with the prefix stripped.
pub fn strip_prefix(tensors: &[(String, Tensor<f32>)], prefix: &str) -> std::collections::BTreeMap<String, Tensor<f32>> {
    tensors.iter().filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone()))).collect()
}
