//! Little-endian primitives shared by the binary formats.

use std::io::{Read, Write};

use crate::error::{format_err, Result};

pub(crate) fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b).map_err(|_| format_err!("unexpected end of file"))?;
    Ok(b[0])
}

pub(crate) fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b).map_err(|_| format_err!("unexpected end of file"))?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| format_err!("unexpected end of file"))?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    Ok(f32::from_bits(read_u32(r)?))
}

/// Reads exactly `n` floats; a short payload is a format error.
pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let want = n.checked_mul(4).ok_or_else(|| format_err!("payload size overflows"))?;
    // read through `take` so a corrupt header cannot force a huge allocation
    let mut bytes = Vec::new();
    r.take(want as u64).read_to_end(&mut bytes)?;
    if bytes.len() != want {
        return Err(format_err!("truncated payload: expected {n} values"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect())
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}
