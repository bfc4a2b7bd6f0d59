use std::io::{Read, Write};

use crate::error::{contract_err, dim_err, format_err, Result};
use crate::io_util::{read_f32, read_f32s, read_u16, read_u32, write_f32s};
use crate::motion::{MotionWindow, FPS, MOTION_DIM};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"ARTM";
const VERSION: u16 = 1;

/// A motion sequence at 25 fps, `F x 56`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionClip {
    frames: Tensor<f32>,
}

impl MotionClip {
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        if frames.shape().len() != 2 || frames.cols() != MOTION_DIM {
            return Err(dim_err!("motion clip must be F x {}, got {:?}", MOTION_DIM, frames.shape()));
        }
        if frames.rows() == 0 {
            return Err(contract_err!("motion clip has no frames"));
        }
        Ok(MotionClip { frames })
    }

    pub fn frames(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn fps(&self) -> f32 {
        FPS
    }

    pub fn channel(&self, c: usize) -> Vec<f32> {
        (0..self.len()).map(|t| self.frames.at(t, c)).collect()
    }

    /// Frames `[start, start + k)`, repeating the last frame past the end.
    pub fn padded_window(&self, start: usize, k: usize) -> MotionWindow {
        let mut out = Tensor::zeros(&[k, MOTION_DIM]);
        let last = self.len() - 1;
        for i in 0..k {
            out.row_mut(i).copy_from_slice(self.frames.row((start + i).min(last)));
        }
        MotionWindow::new(out).expect("width is MOTION_DIM")
    }

    /// Concatenates windows and truncates to `frames` rows.
    pub fn from_windows(windows: &[MotionWindow], frames: usize) -> Result<Self> {
        let parts: Vec<&Tensor<f32>> = windows.iter().map(|w| w.frames()).collect();
        let all = Tensor::concat_rows(&parts)?;
        if all.rows() < frames {
            return Err(dim_err!("{} window frames cannot cover {}", all.rows(), frames));
        }
        MotionClip::new(all.slice_rows(0, frames))
    }
}

pub fn write_motion<W: Write>(w: &mut W, clip: &MotionClip) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&0u16.to_le_bytes())?;
    w.write_all(&FPS.to_le_bytes())?;
    w.write_all(&(clip.len() as u32).to_le_bytes())?;
    w.write_all(&(MOTION_DIM as u32).to_le_bytes())?;
    write_f32s(w, clip.frames.data())
}

pub fn read_motion<R: Read>(r: &mut R) -> Result<MotionClip> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| format_err!("motion file too short"))?;
    if &magic != MAGIC {
        return Err(format_err!("bad motion magic {:?}", magic));
    }
    let version = read_u16(r)?;
    if version != VERSION {
        return Err(format_err!("unsupported motion version {version}"));
    }
    let _reserved = read_u16(r)?;
    let fps = read_f32(r)?;
    if fps != FPS {
        return Err(format_err!("motion must be {FPS} fps, file says {fps}"));
    }
    let frames = read_u32(r)? as usize;
    let dim = read_u32(r)? as usize;
    if dim != MOTION_DIM {
        return Err(format_err!("motion dim {dim}, expected {MOTION_DIM}"));
    }
    let data = read_f32s(r, frames * dim)?;
    MotionClip::new(Tensor::new(vec![frames, dim], data)?).map_err(|e| format_err!("invalid motion: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise_and_header_is_exact() {
        let data: Vec<f32> = (0..7 * MOTION_DIM).map(|i| (i as f32).sin()).collect();
        let clip = MotionClip::new(Tensor::new(vec![7, MOTION_DIM], data).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_motion(&mut buf, &clip).unwrap();
        assert_eq!(buf.len(), 20 + 7 * MOTION_DIM * 4);
        assert_eq!(&buf[..4], b"ARTM");
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 7);
        assert_eq!(read_motion(&mut &buf[..]).unwrap(), clip);
        assert!(read_motion(&mut &buf[..buf.len() - 4]).is_err());
    }

    #[test]
    fn empty_clip_rejected() {
        assert!(MotionClip::new(Tensor::zeros(&[0, MOTION_DIM])).is_err());
    }
}
