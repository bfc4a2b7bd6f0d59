//! Temporal multi-scale residual VQ autoencoder.
//!
//! A window-causal transformer encoder maps `[prev ‖ cur]` to `K x d`
//! latents for the current window. These are quantized residually at each
//! scale of a [`ScaleSchedule`] against one shared [`Codebook`], and a
//! transformer decoder reconstructs the window from the summed codes and
//! the previous window's motion.

mod loss;
mod model;
mod quantize;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::numerics::Tensor;

pub use loss::{codec_loss, loss_on_tape, LossBreakdown, LossVars, LossWeights};
pub use model::{Codec, CodecForward, CodecModel};
pub use quantize::{interp_down, interp_up, quantize_multiscale, quantize_on_tape, Frozen, QuantizeOutput, Quantized};

/// Strictly increasing temporal resolutions ending at the window length.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ScaleSchedule(Vec<usize>);

impl ScaleSchedule {
    pub fn new(lengths: Vec<usize>) -> Result<Self> {
        if lengths.is_empty() {
            return Err(contract_err!("scale schedule is empty"));
        }
        if lengths[0] == 0 {
            return Err(contract_err!("scale lengths must be positive"));
        }
        if lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(contract_err!("scale schedule {:?} is not strictly increasing", lengths));
        }
        Ok(ScaleSchedule(lengths))
    }

    /// `[1, 5, 25, 50, 100]`.
    pub fn paper_default() -> Self {
        ScaleSchedule(vec![1, 5, 25, 50, 100])
    }

    pub fn single(k: usize) -> Result<Self> {
        Self::new(vec![k])
    }

    pub fn lengths(&self) -> &[usize] {
        &self.0
    }

    pub fn num_scales(&self) -> usize {
        self.0.len()
    }

    /// The finest length `K`.
    pub fn window(&self) -> usize {
        *self.0.last().expect("non-empty")
    }

    /// `Σ k_l`.
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    /// Start row of each scale when the scales are laid out back to back.
    pub fn offsets(&self) -> Vec<usize> {
        self.0.iter().scan(0, |acc, &k| {
            let o = *acc;
            *acc += k;
            Some(o)
        }).collect()
    }
}

impl TryFrom<Vec<usize>> for ScaleSchedule {
    type Error = crate::Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        ScaleSchedule::new(v)
    }
}

impl From<ScaleSchedule> for Vec<usize> {
    fn from(s: ScaleSchedule) -> Self {
        s.0
    }
}

/// Shared quantization table, `V x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Tensor<f32>,
}

impl Codebook {
    pub fn new(entries: Tensor<f32>) -> Result<Self> {
        if entries.shape().len() != 2 || entries.rows() == 0 || entries.cols() == 0 {
            return Err(dim_err!("codebook must be a non-empty V x d matrix, got {:?}", entries.shape()));
        }
        if !entries.all_finite() {
            return Err(contract_err!("codebook has non-finite entries"));
        }
        for i in 0..entries.rows() {
            for j in 0..i {
                if entries.row(i) == entries.row(j) {
                    return Err(contract_err!("codebook entries {j} and {i} are identical"));
                }
            }
        }
        Ok(Codebook { entries })
    }

    /// Entries uniform in `[-1/V, 1/V]`.
    pub fn init<R: rand::Rng + ?Sized>(size: usize, dim: usize, rng: &mut R) -> Self {
        let b = 1.0 / size as f64;
        Codebook { entries: Tensor::uniform(&[size, dim], -b, b, rng) }
    }

    pub fn entries(&self) -> &Tensor<f32> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }
}

/// Token indices per scale.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPyramid {
    pub scales: Vec<Vec<usize>>,
}

impl TokenPyramid {
    pub fn validate(&self, sched: &ScaleSchedule, vocab: usize) -> Result<()> {
        if self.scales.len() != sched.num_scales() {
            return Err(dim_err!("pyramid has {} scales, schedule {}", self.scales.len(), sched.num_scales()));
        }
        for (l, (z, &k)) in self.scales.iter().zip(sched.lengths()).enumerate() {
            if z.len() != k {
                return Err(dim_err!("scale {l} has {} tokens, expected {k}", z.len()));
            }
            if let Some(&bad) = z.iter().find(|&&t| t >= vocab) {
                return Err(contract_err!("token {bad} at scale {l} outside codebook of {vocab}"));
            }
        }
        Ok(())
    }

    pub fn finest(&self) -> &[usize] {
        self.scales.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// All scales back to back.
    pub fn flat(&self) -> Vec<usize> {
        self.scales.concat()
    }
}

fn default_true() -> bool {
    true
}

/// Architecture and loss settings of the codec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub schedule: ScaleSchedule,
    pub hidden: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub latent: usize,
    pub codebook_size: usize,
    pub ff_mult: usize,
    /// Condition encoder and decoder on the previous window.
    #[serde(default = "default_true")]
    pub temporal: bool,
    pub loss: LossWeights,
}

impl CodecConfig {
    /// 8 layers, 8 heads, width 512, 256 x 64 codebook.
    pub fn paper() -> Self {
        CodecConfig {
            schedule: ScaleSchedule::paper_default(),
            hidden: 512,
            heads: 8,
            enc_layers: 8,
            dec_layers: 8,
            latent: 64,
            codebook_size: 256,
            ff_mult: 4,
            temporal: true,
            loss: LossWeights::default(),
        }
    }

    /// Small enough to train on one core.
    pub fn desk() -> Self {
        CodecConfig { hidden: 64, heads: 4, enc_layers: 2, dec_layers: 2, latent: 16, codebook_size: 64, ..Self::paper() }
    }

    pub fn window(&self) -> usize {
        self.schedule.window()
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(contract_err!("hidden {} not divisible by {} heads", self.hidden, self.heads));
        }
        if self.latent == 0 || self.codebook_size == 0 || self.ff_mult == 0 {
            return Err(contract_err!("latent, codebook size and ff multiplier must be positive"));
        }
        if self.window() < 3 && self.loss.lambda_smooth > 0.0 {
            return Err(contract_err!("smoothness term needs K >= 3, window is {}", self.window()));
        }
        Ok(())
    }
}
