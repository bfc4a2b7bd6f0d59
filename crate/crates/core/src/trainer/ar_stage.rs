use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{run_loop, Hook, OptimState, Trace, TrainConfig};
use crate::ar::{accuracy_per_scale, block_inputs, ArModel, ArNet, WindowInputs};
use crate::audio::FeatureSeq;
use crate::codec::{CodecModel, TokenPyramid};
use crate::dataset::{window_split, MotionClip};
use crate::error::{contract_err, Result};
use crate::motion::MotionWindow;
use crate::numerics::Tape;

/// One stage-2 example: network inputs, target pyramid and style source.
#[derive(Clone, Debug)]
pub struct ArSample {
    pub inputs: WindowInputs<f32>,
    pub target: TokenPyramid,
    /// Fixed style window, used for evaluation.
    pub style_src: MotionWindow,
    /// Index into [`ArData::clips`].
    pub clip: usize,
}

pub struct ArData {
    pub samples: Vec<ArSample>,
    /// Source clips; training redraws the style window from these every step.
    pub clips: Vec<MotionClip>,
}

impl ArData {
    /// Tokenises every window with the frozen codec. Window `T`'s previous
    /// tokens are the finest tokens of window `T-1`.
    pub fn build(codec: &CodecModel, ar: &ArModel, clips: &[(MotionClip, FeatureSeq)], seed: u64) -> Result<Self> {
        if clips.is_empty() {
            return Err(contract_err!("no clips to train on"));
        }
        let sched = &codec.config().schedule;
        if sched != ar.net.schedule() {
            return Err(contract_err!("AR and codec schedules differ"));
        }
        let mut samples = Vec::new();
        for (c, (motion, feats)) in clips.iter().enumerate() {
            let mut prev_tokens: Option<Vec<usize>> = None;
            for w in window_split(motion, sched.window(), Some(feats), seed.wrapping_add(c as u64))? {
                let target = codec.tokenize(&w.prev, &w.cur)?;
                let blocks = block_inputs(&codec.scale_codes(&target)?, sched)?;
                let audio = w.audio_cur.as_ref().expect("features were given");
                let prev = if ar.config().temporal { prev_tokens.clone() } else { None };
                let inputs = WindowInputs::new(&ar.norm, audio, sched, blocks, prev)?;
                prev_tokens = Some(target.finest().to_vec());
                samples.push(ArSample { inputs, target, style_src: w.style_src, clip: c });
            }
        }
        Ok(ArData { samples, clips: clips.iter().map(|(m, _)| m.clone()).collect() })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Style window for sample `i` at `step`: a seeded random full window of
    /// the sample's own clip.
    pub fn style_at(&self, seed: u64, step: usize, i: usize) -> MotionWindow {
        let s = &self.samples[i];
        let clip = &self.clips[s.clip];
        let k = s.style_src.len();
        if clip.len() <= k {
            return s.style_src.clone();
        }
        let mix = seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
        let start = ChaCha8Rng::seed_from_u64(mix).random_range(0..=clip.len() - k);
        clip.padded_window(start, k)
    }
}

/// Teacher-forced cross-entropy training against a frozen codec's tokens.
/// With `freeze_style` the style encoder keeps its initial weights.
pub fn train_ar(
    model: &mut ArModel,
    data: &ArData,
    cfg: &TrainConfig,
    state: &mut OptimState,
    freeze_style: bool,
    hook: Option<&mut Hook<'_>>,
) -> Result<Trace> {
    let mut trace = Trace::default();
    let net = model.net.clone();
    let active: Vec<bool> = model.store.iter().map(|p| !(freeze_style && ArNet::is_style_param(&p.name))).collect();
    let valid = net.valid_vocab();
    run_loop(
        &mut model.store,
        state,
        cfg,
        data.len(),
        &mut trace,
        Some(&active),
        |store, i, step| {
            let s = &data.samples[i];
            let src = data.style_at(cfg.seed, step, i);
            let mut tape = Tape::new(store);
            let style = net.style_on_tape(&mut tape, src.frames())?;
            let (loss, logits) = net.loss_on_tape(&mut tape, &s.inputs, style, &s.target)?;
            let acc = accuracy_per_scale(tape.value(logits), &s.target, valid);
            let value = tape.scalar(loss) as f64;
            let g = tape.backward(loss)?;
            Ok((g, vec![("loss", value), ("acc", acc.iter().sum::<f64>() / acc.len() as f64)]))
        },
        hook,
    )?;
    Ok(trace)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArEval {
    pub loss: f64,
    pub acc_per_scale: Vec<f64>,
    /// Mean of the per-scale accuracies.
    pub acc: f64,
}

/// Teacher-forced loss and token accuracy over the whole set.
pub fn evaluate_ar(model: &ArModel, data: &ArData) -> Result<ArEval> {
    let l = model.net.schedule().num_scales();
    let mut out = ArEval { acc_per_scale: vec![0.0; l], ..ArEval::default() };
    for s in &data.samples {
        let mut tape = Tape::new(&model.store);
        let style = model.net.style_on_tape(&mut tape, s.style_src.frames())?;
        let (loss, logits) = model.net.loss_on_tape(&mut tape, &s.inputs, style, &s.target)?;
        out.loss += tape.scalar(loss) as f64;
        for (a, b) in out.acc_per_scale.iter_mut().zip(accuracy_per_scale(tape.value(logits), &s.target, model.net.valid_vocab())) {
            *a += b;
        }
    }
    let n = data.len() as f64;
    out.loss /= n;
    for a in &mut out.acc_per_scale {
        *a /= n;
    }
    out.acc = out.acc_per_scale.iter().sum::<f64>() / l as f64;
    Ok(out)
}
