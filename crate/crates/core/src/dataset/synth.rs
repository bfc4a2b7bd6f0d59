use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::MotionClip;
use crate::audio::{compute_logmel, AudioClip, FeatureSeq, LogMelConfig, SAMPLE_RATE};
use crate::error::{contract_err, Result};
use crate::motion::{EXPR_DIM, JAW_CHANNEL, MOTION_DIM, ROT_CHANNEL};
use crate::numerics::Tensor;

const SAMPLES_PER_FRAME: usize = 640;
const LATENTS: usize = 6;

/// Knobs for [`synth_generate`]. Defaults give about two syllable-length
/// bursts (240 to 480 ms) per second.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub bursts_per_second: f64,
    pub motion_scale: f32,
    pub jaw_gain: f32,
    /// Burst length range in frames, `[min, max)`.
    pub burst_frames: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { bursts_per_second: 2.0, motion_scale: 0.25, jaw_gain: 0.8, burst_frames: (6, 13) }
    }
}

/// A synthetic motion clip with its paired waveform and log-mel features.
#[derive(Clone, Debug)]
pub struct SynthClip {
    pub motion: MotionClip,
    pub audio: AudioClip,
    pub features: FeatureSeq,
}

struct Burst {
    start: usize,
    len: usize,
    amp: f32,
    f0: f32,
}

/// Deterministic synthetic corpus of `n_clips` clips with `frames` frames each.
///
/// Every channel is a mixture of slow sinusoids (shared mixing matrix,
/// per-clip frequencies, phases and gain). The jaw channel, plus a few
/// expression channels coupled to it, additionally carries raised-cosine
/// pulses placed exactly where the waveform has harmonic energy bursts.
pub fn synth_generate(seed: u64, n_clips: usize, frames: usize, cfg: &SynthConfig) -> Result<Vec<SynthClip>> {
    if n_clips == 0 {
        return Err(contract_err!("n_clips must be at least 1"));
    }
    if frames == 0 {
        return Err(contract_err!("clips need at least one frame"));
    }
    if cfg.burst_frames.0 == 0 || cfg.burst_frames.0 >= cfg.burst_frames.1 {
        return Err(contract_err!("burst length range {:?} is empty", cfg.burst_frames));
    }
    let mut global = ChaCha8Rng::seed_from_u64(seed);
    let mixing = Tensor::<f32>::randn(&[MOTION_DIM, LATENTS], 1.0 / (LATENTS as f64).sqrt(), &mut global);
    let jaw_coupling: Vec<f32> = (0..EXPR_DIM).map(|c| if c < 8 { 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut global) as f32 } else { 0.0 }).collect();
    (0..n_clips)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1));
            one_clip(&mut rng, frames, cfg, &mixing, &jaw_coupling)
        })
        .collect()
}

fn one_clip(rng: &mut ChaCha8Rng, frames: usize, cfg: &SynthConfig, mixing: &Tensor<f32>, jaw_coupling: &[f32]) -> Result<SynthClip> {
    let seconds = frames as f64 / 25.0;
    let n_samples = frames * SAMPLES_PER_FRAME;

    // bursts on the motion frame grid
    let mut bursts = Vec::new();
    let mut t = rng.random_range(0.0..0.3);
    while t < seconds {
        let len = rng.random_range(cfg.burst_frames.0..cfg.burst_frames.1);
        let start = (t * 25.0) as usize;
        if start + len <= frames {
            bursts.push(Burst { start, len, amp: rng.random_range(0.5..1.0), f0: rng.random_range(110.0..240.0) });
        }
        t += len as f64 / 25.0 + rng.random_range(0.05..2.0 / cfg.bursts_per_second);
    }

    let mut samples: Vec<f32> = (0..n_samples).map(|_| rng.random_range(-0.003..0.003)).collect();
    let mut jaw = vec![0.0f32; frames];
    for b in &bursts {
        let (s0, s1) = (b.start * SAMPLES_PER_FRAME, (b.start + b.len) * SAMPLES_PER_FRAME);
        let span = (s1 - s0) as f32;
        for (j, s) in samples[s0..s1].iter_mut().enumerate() {
            let env = 0.5 - 0.5 * (2.0 * std::f32::consts::PI * j as f32 / span).cos();
            let ph = 2.0 * std::f32::consts::PI * b.f0 * (s0 + j) as f32 / SAMPLE_RATE as f32;
            let tone = ph.sin() + 0.5 * (2.0 * ph).sin() + 0.25 * (3.0 * ph).sin();
            *s += 0.4 * b.amp * env * tone;
        }
        for j in 0..b.len {
            let env = 0.5 - 0.5 * (2.0 * std::f32::consts::PI * (j as f32 + 0.5) / b.len as f32).cos();
            jaw[b.start + j] += cfg.jaw_gain * b.amp * env;
        }
    }

    let gain: f32 = rng.random_range(0.6..1.4);
    let lat: Vec<(f32, f32)> = (0..LATENTS).map(|_| (rng.random_range(0.1..0.8), rng.random_range(0.0..std::f32::consts::TAU))).collect();
    let offsets: Vec<f32> = (0..MOTION_DIM).map(|_| 0.05 * Distribution::<f64>::sample(&StandardNormal, rng) as f32).collect();
    let mut data = vec![0.0f32; frames * MOTION_DIM];
    for t in 0..frames {
        let time = t as f32 / 25.0;
        let src: Vec<f32> = lat.iter().map(|&(f, p)| (std::f32::consts::TAU * f * time + p).sin()).collect();
        let row = &mut data[t * MOTION_DIM..(t + 1) * MOTION_DIM];
        for (c, v) in row.iter_mut().enumerate() {
            let mix: f32 = mixing.row(c).iter().zip(&src).map(|(a, b)| a * b).sum();
            let scale = if (ROT_CHANNEL..ROT_CHANNEL + 3).contains(&c) { 0.3 } else { 1.0 };
            *v = scale * (cfg.motion_scale * gain * mix + offsets[c]);
        }
        row[JAW_CHANNEL] = jaw[t] + 0.05 * src[0];
        for (c, &k) in jaw_coupling.iter().enumerate() {
            row[c] += k * jaw[t];
        }
    }
    let motion = MotionClip::new(Tensor::new(vec![frames, MOTION_DIM], data)?)?;
    let audio = AudioClip::new(samples)?;
    let features = compute_logmel(&audio, &LogMelConfig::default())?;
    Ok(SynthClip { motion, audio, features })
}
