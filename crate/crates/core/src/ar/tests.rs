use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::audio::FeatureSeq;
use crate::codec::{CodecConfig, CodecModel, LossWeights, TokenPyramid};
use crate::motion::{MotionWindow, MOTION_DIM};
use crate::numerics::{grad_check, ParamStore, Tape, Tensor};

fn codec_cfg(sched: Vec<usize>) -> CodecConfig {
    let k = *sched.last().unwrap();
    CodecConfig {
        schedule: ScaleSchedule::new(sched).unwrap(),
        hidden: 16,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        latent: 4,
        codebook_size: 16,
        ff_mult: 2,
        temporal: true,
        loss: LossWeights { lambda_smooth: if k >= 3 { 1.0 } else { 0.0 }, ..LossWeights::default() },
    }
}

fn ar_cfg() -> ArConfig {
    ArConfig { dim: 16, heads: 2, layers: 2, cond_dim: 8, feat_dim: 6, style_layers: 1, ..ArConfig::desk() }
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn window(k: usize, seed: u64) -> MotionWindow {
    MotionWindow::new(rand(&[k, MOTION_DIM], seed).map(|x| 0.3 * x)).unwrap()
}

struct Fixture {
    codec: CodecModel,
    ar: ArModel,
}

fn fixture(sched: Vec<usize>) -> Fixture {
    let c = codec_cfg(sched);
    Fixture { codec: CodecModel::new(&c, 1).unwrap(), ar: ArModel::new(&ar_cfg(), &c, 2).unwrap() }
}

fn inputs(f: &Fixture, audio_seed: u64, prev: Option<Vec<usize>>) -> (WindowInputs<f32>, TokenPyramid) {
    let k = f.codec.config().window();
    let tokens = f.codec.tokenize(&window(k, audio_seed + 100), &window(k, audio_seed + 200)).unwrap();
    let codes = f.codec.scale_codes(&tokens).unwrap();
    let sched = &f.codec.config().schedule;
    let blocks = block_inputs(&codes, sched).unwrap();
    let audio = rand(&[2 * k, 6], audio_seed);
    (WindowInputs::new(&f.ar.norm, &audio, sched, blocks, prev).unwrap(), tokens)
}

#[test]
fn style_token_contract() {
    let f = fixture(vec![1, 5, 25, 50, 100]);
    let w = window(100, 1);
    let a = f.ar.style_encode(&w).unwrap();
    assert_eq!(a, f.ar.style_encode(&w).unwrap());
    assert_eq!(a.0.shape(), &[1, 8]);
    let mut other = w.frames().clone();
    other.row_mut(37)[3] += 0.1;
    let b = f.ar.style_encode(&MotionWindow::new(other).unwrap()).unwrap();
    assert!(a.0.max_abs_diff(&b.0) > 0.0);
    assert!(matches!(f.ar.style_encode(&window(99, 1)), Err(crate::Error::Dimension(_))));
}

#[test]
fn logits_shape_and_block_causality() {
    let f = fixture(vec![1, 5, 25, 50, 100]);
    let (inp, _) = inputs(&f, 3, Some(vec![4; 100]));
    let s = f.ar.style_encode(&window(100, 2)).unwrap();
    let base = f.ar.forward_logits(&inp, &s).unwrap();
    assert_eq!(base.shape(), &[181, 256]);
    // blocks 1 and 2 occupy rows 0..6
    let mut zeroed = inp.clone();
    zeroed.blocks[2] = Tensor::zeros(zeroed.blocks[2].shape());
    for r in 31..181 {
        zeroed.cond.row_mut(r).fill(9.0);
    }
    let z = f.ar.forward_logits(&zeroed, &s).unwrap();
    assert_eq!(base.slice_rows(0, 6).data(), z.slice_rows(0, 6).data());
    assert_ne!(base.slice_rows(6, 31).data(), z.slice_rows(6, 31).data());
}

#[test]
fn style_reaches_the_first_block() {
    let f = fixture(vec![1, 5, 25, 50, 100]);
    let (inp, _) = inputs(&f, 4, None);
    let a = f.ar.forward_logits(&inp, &f.ar.style_encode(&window(100, 5)).unwrap()).unwrap();
    let b = f.ar.forward_logits(&inp, &f.ar.style_encode(&window(100, 6)).unwrap()).unwrap();
    assert!(a.slice_rows(0, 1).max_abs_diff(&b.slice_rows(0, 1)) > 0.0);
}

#[test]
fn loss_special_cases() {
    let single = |k: usize| TokenPyramid { scales: vec![(0..k).map(|i| i % 256).collect()] };
    let uniform = Tensor::<f64>::zeros(&[3, 256]);
    assert!((ar_loss(&uniform, &single(3)).unwrap() - 256f64.ln()).abs() < 1e-6);
    let mut onehot = Tensor::<f64>::zeros(&[3, 256]);
    for i in 0..3 {
        onehot.row_mut(i)[i] = 50.0;
    }
    assert!(ar_loss(&onehot, &single(3)).unwrap() < 1e-3);
    let mut hand = Tensor::<f64>::zeros(&[2, 256]);
    hand.row_mut(0)[0] = 1.0;
    hand.row_mut(1)[1] = 1.0;
    let want = -(1f64.exp() / (1f64.exp() + 255.0)).ln();
    assert!((ar_loss(&hand, &TokenPyramid { scales: vec![vec![0, 1]] }).unwrap() - want).abs() < 1e-6);
    let bad = TokenPyramid { scales: vec![vec![0, 256]] };
    assert!(matches!(ar_loss(&hand, &bad), Err(crate::Error::Contract(_))));
}

#[test]
fn sequential_passes_match_teacher_forcing() {
    let f = fixture(vec![1, 5, 25, 50, 100]);
    let audio = rand(&[200, 6], 7);
    let s = f.ar.style_encode(&window(100, 8)).unwrap();
    let pyr = generate_window(&f.ar, &f.codec, &audio, &s, None, &DecodeMode::Argmax, 0).unwrap();
    assert_eq!(pyr, generate_window(&f.ar, &f.codec, &audio, &s, None, &DecodeMode::Argmax, 0).unwrap());
    let sched = f.codec.config().schedule.clone();
    let blocks = block_inputs(&f.codec.scale_codes(&pyr).unwrap(), &sched).unwrap();
    let inp = WindowInputs::new(&f.ar.norm, &audio, &sched, blocks, None).unwrap();
    let full = f.ar.forward_logits(&inp, &s).unwrap();
    let offsets = sched.offsets();
    for (l, &k) in sched.lengths().iter().enumerate() {
        let part = f.ar.logits_prefix(&inp, &s, l + 1).unwrap();
        let o = offsets[l];
        assert!(part.slice_rows(o, o + k).max_abs_diff(&full.slice_rows(o, o + k)) < 1e-5, "scale {l}");
    }
    let acc = accuracy_per_scale(&full, &pyr, 16);
    assert!(acc.iter().all(|&a| a == 1.0), "{acc:?}");
}

#[test]
fn zero_temperature_is_argmax() {
    let f = fixture(vec![1, 5, 25, 50, 100]);
    let audio = rand(&[200, 6], 9);
    let s = f.ar.style_encode(&window(100, 10)).unwrap();
    let a = generate_window(&f.ar, &f.codec, &audio, &s, Some(&[3; 100]), &DecodeMode::Argmax, 0).unwrap();
    let t0 = DecodeMode::Sample { top_k: 5, temperature: 0.0, seed: 11 };
    assert_eq!(a, generate_window(&f.ar, &f.codec, &audio, &s, Some(&[3; 100]), &t0, 0).unwrap());
    let hot = DecodeMode::Sample { top_k: 5, temperature: 1.0, seed: 11 };
    let x = generate_window(&f.ar, &f.codec, &audio, &s, None, &hot, 0).unwrap();
    assert_eq!(x, generate_window(&f.ar, &f.codec, &audio, &s, None, &hot, 0).unwrap());
    assert!(x.flat().iter().all(|&t| t < 16));
}

#[test]
fn stream_lengths_determinism_and_window_causality() {
    let f = fixture(vec![1, 5, 25, 50, 100]);
    let s = f.ar.style_encode(&window(100, 12)).unwrap();
    let feats = |n: usize, seed: u64| FeatureSeq::new(rand(&[n, 6], seed), 50.0).unwrap();
    let eight = feats(400, 13);
    let a = generate_stream(&f.ar, &f.codec, &eight, &s, &DecodeMode::Argmax).unwrap();
    assert_eq!(a.len(), 200);
    assert_eq!(a, generate_stream(&f.ar, &f.codec, &eight, &s, &DecodeMode::Argmax).unwrap());
    assert_eq!(generate_stream(&f.ar, &f.codec, &feats(250, 14), &s, &DecodeMode::Argmax).unwrap().len(), 125);
    // replacing the second window's audio leaves the first window alone
    let mut changed = eight.frames().clone();
    for r in 200..400 {
        changed.row_mut(r).fill(-3.0);
    }
    let b = generate_stream(&f.ar, &f.codec, &FeatureSeq::new(changed, 50.0).unwrap(), &s, &DecodeMode::Argmax).unwrap();
    assert_eq!(a.frames().slice_rows(0, 100), b.frames().slice_rows(0, 100));
    let empty = FeatureSeq::new(Tensor::zeros(&[0, 6]), 50.0);
    if let Ok(e) = empty {
        assert!(matches!(generate_stream(&f.ar, &f.codec, &e, &s, &DecodeMode::Argmax), Err(crate::Error::Contract(_))));
    }
}

#[test]
fn ablations_change_the_layout() {
    let c = codec_cfg(vec![100]);
    let cfg = ArConfig { temporal: false, use_style: false, ..ar_cfg() };
    let ar = ArModel::new(&cfg, &c, 3).unwrap();
    assert_eq!(ar.net.prefix_len(), 1);
    let a = ar.style_encode(&window(100, 1)).unwrap();
    assert_eq!(a, ar.style_encode(&window(100, 2)).unwrap());
}

#[test]
fn toy_loss_gradients_match_finite_differences() {
    let c = codec_cfg(vec![1, 2]);
    let codec = CodecModel::new(&c, 4).unwrap();
    let f = Fixture { ar: ArModel::new(&ar_cfg(), &c, 5).unwrap(), codec };
    let (inp, target) = inputs(&f, 15, Some(vec![1, 2]));
    let inp = inp.cast::<f64>();
    let example = window(2, 16).frames().cast::<f64>();
    let mut store: ParamStore<f64> = f.ar.store.cast();
    let net = f.ar.net.clone();
    let err = grad_check(&mut store, 1e-5, |tape: &mut Tape<'_, f64>| {
        let s = net.style_on_tape(tape, &example)?;
        Ok(net.loss_on_tape(tape, &inp, s, &target)?.0)
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}
