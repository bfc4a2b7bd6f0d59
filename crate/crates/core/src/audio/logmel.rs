use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{AudioClip, FeatureSeq, SAMPLE_RATE};
use crate::error::Result;
use crate::numerics::Tensor;

pub const LOG_FLOOR: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogMelConfig {
    pub n_mels: usize,
    pub win: usize,
    pub hop: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        LogMelConfig { n_mels: 80, win: 400, hop: 320, f_min: 0.0, f_max: SAMPLE_RATE as f64 / 2.0 }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequency of each triangular filter, in Hz.
pub fn mel_center_frequencies(cfg: &LogMelConfig) -> Vec<f64> {
    mel_edges(cfg)[1..=cfg.n_mels].to_vec()
}

fn mel_edges(cfg: &LogMelConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// `n_mels x (win/2 + 1)` triangular filters with unit peak.
fn filterbank(cfg: &LogMelConfig) -> Vec<Vec<f32>> {
    let bins = cfg.win / 2 + 1;
    let edges = mel_edges(cfg);
    let bin_hz = SAMPLE_RATE as f64 / cfg.win as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|b| {
                    let f = b as f64 * bin_hz;
                    let w = if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    };
                    w as f32
                })
                .collect()
        })
        .collect()
}

/// Log-mel spectrogram at `hop` spacing with centered, zero-padded frames.
///
/// Frame `t` is centered on sample `t * hop`; there are `ceil(len / hop)`
/// frames, so a 320-sample hop at 16 kHz yields 50 frames per second.
pub fn compute_logmel(audio: &AudioClip, cfg: &LogMelConfig) -> Result<FeatureSeq> {
    audio.require_non_empty()?;
    let x = audio.samples();
    let frames = x.len().div_ceil(cfg.hop);
    let bins = cfg.win / 2 + 1;
    let fb = filterbank(cfg);
    let window: Vec<f32> = (0..cfg.win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f32::consts::PI * i as f32 / cfg.win as f32).cos())
        .collect();
    let fft = FftPlanner::<f32>::new().plan_fft_forward(cfg.win);
    let mut buf = vec![Complex::new(0.0f32, 0.0); cfg.win];
    let mut mag = vec![0.0f32; bins];
    let mut out = Tensor::zeros(&[frames, cfg.n_mels]);
    let half = (cfg.win / 2) as isize;
    for t in 0..frames {
        let start = (t * cfg.hop) as isize - half;
        for (i, b) in buf.iter_mut().enumerate() {
            let idx = start + i as isize;
            let s = if idx >= 0 && (idx as usize) < x.len() { x[idx as usize] } else { 0.0 };
            *b = Complex::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (m, b) in mag.iter_mut().zip(&buf) {
            *m = b.norm();
        }
        for (o, filt) in out.row_mut(t).iter_mut().zip(&fb) {
            let e: f32 = filt.iter().zip(&mag).map(|(w, m)| w * m).sum();
            *o = (e + LOG_FLOOR).ln();
        }
    }
    FeatureSeq::new(out, cfg_rate(cfg))
}

fn cfg_rate(cfg: &LogMelConfig) -> f32 {
    SAMPLE_RATE as f32 / cfg.hop as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f32, seconds: f32) -> AudioClip {
        let n = (seconds * SAMPLE_RATE as f32) as usize;
        AudioClip::new((0..n).map(|i| 0.5 * (2.0 * std::f32::consts::PI * freq * i as f32 / 16_000.0).sin()).collect()).unwrap()
    }

    #[test]
    fn four_seconds_is_two_hundred_frames() {
        let f = compute_logmel(&tone(200.0, 4.0), &LogMelConfig::default()).unwrap();
        assert_eq!(f.len(), 200);
        assert_eq!(f.dim(), 80);
        assert_eq!(f.frame_rate(), 50.0);
    }

    #[test]
    fn silence_hits_log_floor() {
        let f = compute_logmel(&AudioClip::new(vec![0.0; 8000]).unwrap(), &LogMelConfig::default()).unwrap();
        let floor = LOG_FLOOR.ln();
        assert!(f.frames().data().iter().all(|&v| v == floor));
    }

    #[test]
    fn pure_tone_peaks_at_nearest_center() {
        // independent oracle: HTK mel spacing computed from scratch
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let top = mel(8000.0);
        let centers: Vec<f64> = (1..=80).map(|i| inv(top * i as f64 / 81.0)).collect();
        let expect = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 440.0).abs().partial_cmp(&(b.1 - 440.0).abs()).unwrap())
            .unwrap()
            .0;
        let f = compute_logmel(&tone(440.0, 1.0), &LogMelConfig::default()).unwrap();
        for t in 0..f.len() {
            let row = f.frames().row(t);
            let argmax = (0..80).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
            assert_eq!(argmax, expect, "frame {t}");
        }
    }

    #[test]
    fn empty_audio_rejected() {
        let r = compute_logmel(&AudioClip::new(vec![]).unwrap(), &LogMelConfig::default());
        assert!(matches!(r, Err(crate::Error::Contract(_))));
    }

    #[test]
    fn deterministic() {
        let a = compute_logmel(&tone(300.0, 0.5), &LogMelConfig::default()).unwrap();
        let b = compute_logmel(&tone(300.0, 0.5), &LogMelConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
