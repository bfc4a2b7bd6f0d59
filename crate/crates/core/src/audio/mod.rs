//! Speech feature front-end.
//!
//! Features run at 50 frames per second. The built-in extractor is a log-mel
//! spectrogram; precomputed features from any external encoder can be
//! ingested through the ARTF file format.

mod features;
mod logmel;
mod wav;

pub use features::{read_features, resample_to_scale, write_features, FeatureSeq, FEATURE_RATE};
pub use logmel::{compute_logmel, mel_center_frequencies, LogMelConfig, LOG_FLOOR};
pub use wav::{read_wav, write_wav};
pub(crate) use features::{linear_matrix, region_mean_matrix};

use crate::error::{contract_err, Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono PCM at 16 kHz, samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("audio contains non-finite samples".into()));
        }
        Ok(AudioClip { samples })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    pub fn require_non_empty(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(contract_err!("audio clip is empty"));
        }
        Ok(())
    }
}
