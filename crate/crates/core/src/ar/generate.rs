use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{argmax_valid, block_inputs, ArModel, StyleToken, WindowInputs};
use crate::audio::FeatureSeq;
use crate::codec::{CodecModel, TokenPyramid};
use crate::dataset::{MotionClip, FEATURES_PER_FRAME};
use crate::error::{contract_err, dim_err, Result};
use crate::motion::MotionWindow;
use crate::numerics::Tensor;

/// How tokens are picked from logits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum DecodeMode {
    Argmax,
    /// Top-k sampling; temperature 0 falls back to argmax.
    Sample { top_k: usize, temperature: f64, seed: u64 },
}

fn pick<R: Rng>(row: &[f32], valid: usize, mode: &DecodeMode, rng: &mut R) -> usize {
    match *mode {
        DecodeMode::Argmax => argmax_valid(row, valid),
        DecodeMode::Sample { temperature, .. } if temperature <= 0.0 => argmax_valid(row, valid),
        DecodeMode::Sample { top_k, temperature, .. } => {
            let mut idx: Vec<usize> = (0..valid.min(row.len())).collect();
            // stable sort keeps lower indices first among equal logits
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
            idx.truncate(top_k.max(1));
            let top = row[idx[0]] as f64;
            let w: Vec<f64> = idx.iter().map(|&j| ((row[j] as f64 - top) / temperature).exp()).collect();
            let mut u = rng.random_range(0.0..w.iter().sum::<f64>());
            for (j, wj) in idx.iter().zip(&w) {
                if u < *wj {
                    return *j;
                }
                u -= wj;
            }
            *idx.last().expect("non-empty")
        }
    }
}

/// Predicts one window's pyramid scale by scale, each scale's tokens in
/// one parallel step. `audio` is the window's raw `2K x D_a` features.
pub fn generate_window(
    ar: &ArModel,
    codec: &CodecModel,
    audio: &Tensor<f32>,
    style: &StyleToken,
    prev: Option<&[usize]>,
    mode: &DecodeMode,
    window_index: u64,
) -> Result<TokenPyramid> {
    let sched = ar.net.schedule().clone();
    if &sched != &codec.config().schedule {
        return Err(contract_err!("AR and codec schedules differ"));
    }
    let k = sched.window();
    if audio.rows() != k * FEATURES_PER_FRAME {
        return Err(dim_err!("window audio has {} frames, expected {}", audio.rows(), k * FEATURES_PER_FRAME));
    }
    let d = codec.config().latent;
    let mut inp = WindowInputs::new(&ar.norm, audio, &sched, vec![Tensor::zeros(&[sched.lengths()[0], d])], prev.map(<[usize]>::to_vec))?;
    let seed = match mode {
        DecodeMode::Sample { seed, .. } => *seed,
        DecodeMode::Argmax => 0,
    };
    let mut scales = Vec::with_capacity(sched.num_scales());
    let mut codes = Vec::with_capacity(sched.num_scales());
    for (l, &kl) in sched.lengths().iter().enumerate() {
        if l > 0 {
            inp.blocks = block_inputs(&codes, &sched)?;
        }
        let logits = ar.logits_prefix(&inp, style, l + 1)?;
        let n = logits.rows();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ window_index.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((l as u64) << 56));
        let z: Vec<usize> = (n - kl..n).map(|r| pick(logits.row(r), ar.net.valid_vocab(), mode, &mut rng)).collect();
        codes.push(codec.code(&z)?);
        scales.push(z);
    }
    Ok(TokenPyramid { scales })
}

/// Rolling per-stream state: previous tokens and decoded context.
pub struct Stream<'m> {
    ar: &'m ArModel,
    codec: &'m CodecModel,
    style: StyleToken,
    mode: DecodeMode,
    prev: Option<Vec<usize>>,
    ctx: MotionWindow,
    index: u64,
}

impl<'m> Stream<'m> {
    pub fn new(ar: &'m ArModel, codec: &'m CodecModel, style: StyleToken, mode: DecodeMode) -> Self {
        let k = codec.config().window();
        Stream { ar, codec, style, mode, prev: None, ctx: MotionWindow::neutral(k), index: 0 }
    }

    /// Generates and decodes the next window.
    pub fn step(&mut self, audio: &Tensor<f32>) -> Result<MotionWindow> {
        let pyr = generate_window(self.ar, self.codec, audio, &self.style, self.prev.as_deref(), &self.mode, self.index)?;
        let win = self.codec.decode(&pyr, &self.ctx)?;
        self.prev = self.ar.config().temporal.then(|| pyr.finest().to_vec());
        self.ctx = win.clone();
        self.index += 1;
        Ok(win)
    }
}

/// Motion for a whole feature sequence, in consecutive 4 s windows with the
/// last one zero-padded, truncated to the audio length.
pub fn generate_stream(ar: &ArModel, codec: &CodecModel, features: &FeatureSeq, style: &StyleToken, mode: &DecodeMode) -> Result<MotionClip> {
    if features.is_empty() {
        return Err(contract_err!("no audio features to generate from"));
    }
    let k = codec.config().window();
    let per = k * FEATURES_PER_FRAME;
    let frames = features.len().div_ceil(FEATURES_PER_FRAME);
    let mut stream = Stream::new(ar, codec, style.clone(), *mode);
    let mut wins = Vec::new();
    for w in 0..features.len().div_ceil(per) {
        wins.push(stream.step(&features.window(w * per, per))?);
    }
    MotionClip::from_windows(&wins, frames)
}
