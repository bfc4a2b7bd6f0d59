use std::io::{Read, Write};

use crate::error::{contract_err, dim_err, format_err, Error, Result};
use crate::io_util::{read_f32s, read_u16, read_u32, write_f32s};
use crate::numerics::{Real, Tensor};

pub const FEATURE_RATE: f32 = 50.0;

const MAGIC: &[u8; 4] = b"ARTF";
const VERSION: u16 = 1;

/// Frame-rate speech features, `T_f x D_a`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSeq {
    frames: Tensor<f32>,
    frame_rate: f32,
}

impl FeatureSeq {
    pub fn new(frames: Tensor<f32>, frame_rate: f32) -> Result<Self> {
        if frames.shape().len() != 2 {
            return Err(dim_err!("features must be a matrix, got {:?}", frames.shape()));
        }
        if !frames.all_finite() {
            return Err(Error::Numeric("features contain non-finite values".into()));
        }
        if !(frame_rate > 0.0) {
            return Err(contract_err!("frame rate must be positive"));
        }
        Ok(FeatureSeq { frames, frame_rate })
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

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame_rate(&self) -> f32 {
        self.frame_rate
    }

    /// Rows `[start, start + len)`, zero-padded past the end.
    pub fn window(&self, start: usize, len: usize) -> Tensor<f32> {
        let mut out = Tensor::zeros(&[len, self.dim()]);
        for i in 0..len {
            if start + i < self.len() {
                out.row_mut(i).copy_from_slice(self.frames.row(start + i));
            }
        }
        out
    }
}

/// Resamples `T_w` rows to `k` rows.
///
/// Downsampling (`k <= T_w`) averages the rows of each region
/// `[floor(j T_w / k), floor((j+1) T_w / k))`. Upsampling interpolates
/// linearly with the first and last rows pinned to the endpoints.
pub fn resample_to_scale<T: Real>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let t = x.rows();
    if t == 0 || k == 0 {
        return Err(contract_err!("resampling needs at least one input and output row"));
    }
    Ok(if k <= t { region_mean_matrix(t, k) } else { linear_matrix(t, k) }.matmul(x)?)
}

/// `k x t` averaging operator.
pub(crate) fn region_mean_matrix<T: Real>(t: usize, k: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[k, t]);
    for j in 0..k {
        let (a, b) = (j * t / k, (j + 1) * t / k);
        let w = T::one() / T::lit((b - a) as f64);
        for i in a..b {
            m.row_mut(j)[i] = w;
        }
    }
    m
}

/// `big x small` endpoint-aligned linear interpolation operator.
pub(crate) fn linear_matrix<T: Real>(small: usize, big: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[big, small]);
    for j in 0..big {
        let pos = if big == 1 { 0.0 } else { j as f64 * (small - 1) as f64 / (big - 1) as f64 };
        let lo = (pos.floor() as usize).min(small - 1);
        let hi = (lo + 1).min(small - 1);
        let frac = pos - lo as f64;
        let row = m.row_mut(j);
        row[lo] = row[lo] + T::lit(1.0 - frac);
        if hi != lo {
            row[hi] = row[hi] + T::lit(frac);
        }
    }
    m
}

pub fn write_features<W: Write>(w: &mut W, f: &FeatureSeq) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&0u16.to_le_bytes())?;
    w.write_all(&f.frame_rate.to_le_bytes())?;
    w.write_all(&(f.len() as u32).to_le_bytes())?;
    w.write_all(&(f.dim() as u32).to_le_bytes())?;
    write_f32s(w, f.frames.data())
}

pub fn read_features<R: Read>(r: &mut R) -> Result<FeatureSeq> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| format_err!("feature file too short"))?;
    if &magic != MAGIC {
        return Err(format_err!("bad feature magic {:?}", magic));
    }
    let version = read_u16(r)?;
    if version != VERSION {
        return Err(format_err!("unsupported feature version {version}"));
    }
    let _reserved = read_u16(r)?;
    let rate = f32::from_bits(read_u32(r)?);
    let frames = read_u32(r)? as usize;
    let dim = read_u32(r)? as usize;
    let data = read_f32s(r, frames * dim)?;
    FeatureSeq::new(Tensor::new(vec![frames, dim], data)?, rate).map_err(|e| format_err!("invalid features: {e}"))
}
