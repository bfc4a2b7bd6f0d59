use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::MotionClip;
use crate::audio::FeatureSeq;
use crate::error::{contract_err, Result};
use crate::motion::MotionWindow;
use crate::numerics::Tensor;

/// Feature frames per motion frame (50 Hz features, 25 fps motion).
pub const FEATURES_PER_FRAME: usize = 2;

/// One training example: window `T` with its predecessor.
#[derive(Clone, Debug)]
pub struct WindowedSample {
    pub index: usize,
    pub prev: MotionWindow,
    pub cur: MotionWindow,
    /// `2K x D_a` features aligned with `cur`, zero-padded past the end.
    pub audio_cur: Option<Tensor<f32>>,
    pub style_src: MotionWindow,
    /// Real (unpadded) frames in `cur`.
    pub valid: usize,
}

/// Splits a clip into non-overlapping windows of `k` frames.
///
/// Window 0's predecessor is the neutral (all-zero) window. The final partial
/// window repeats its last frame. The style source is a seeded random full
/// window of the same clip.
pub fn window_split(clip: &MotionClip, k: usize, features: Option<&FeatureSeq>, seed: u64) -> Result<Vec<WindowedSample>> {
    if k < 2 {
        return Err(contract_err!("window length must be at least 2, got {k}"));
    }
    if clip.is_empty() {
        return Err(contract_err!("cannot split an empty clip"));
    }
    let f = clip.len();
    let count = f.div_ceil(k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut prev = MotionWindow::neutral(k);
    for w in 0..count {
        let cur = clip.padded_window(w * k, k);
        let style_start = if f > k { rng.random_range(0..=f - k) } else { 0 };
        let style_src = clip.padded_window(style_start, k);
        let audio_cur = features.map(|fs| fs.window(w * k * FEATURES_PER_FRAME, k * FEATURES_PER_FRAME));
        out.push(WindowedSample { index: w, prev: prev.clone(), cur: cur.clone(), audio_cur, style_src, valid: (f - w * k).min(k) });
        prev = cur;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::motion::MOTION_DIM;

    fn ramp(f: usize) -> MotionClip {
        let data = (0..f * MOTION_DIM).map(|i| (i / MOTION_DIM) as f32 + (i % MOTION_DIM) as f32 * 1e-3).collect();
        MotionClip::new(Tensor::new(vec![f, MOTION_DIM], data).unwrap()).unwrap()
    }

    #[test]
    fn two_hundred_fifty_frames_into_hundreds() {
        let clip = ramp(250);
        let w = window_split(&clip, 100, None, 0).unwrap();
        assert_eq!(w.len(), 3);
        let third = w[2].cur.frames();
        for i in 0..50 {
            assert_eq!(third.row(i), clip.frames().row(200 + i));
        }
        for i in 50..100 {
            assert_eq!(third.row(i), clip.frames().row(249));
        }
        assert_eq!(w[2].valid, 50);
    }

    #[test]
    fn exact_and_degenerate_windows() {
        let w = window_split(&ramp(100), 100, None, 0).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].prev, MotionWindow::neutral(100));
        let one = ramp(1);
        let w = window_split(&one, 100, None, 0).unwrap();
        assert_eq!(w.len(), 1);
        for i in 0..100 {
            assert_eq!(w[0].cur.frames().row(i), one.frames().row(0));
        }
        assert!(window_split(&one, 1, None, 0).is_err());
    }

    #[test]
    fn features_are_aligned_and_padded() {
        let clip = ramp(150);
        let feats = FeatureSeq::new(Tensor::new(vec![300, 1], (0..300).map(|i| i as f32 + 1.0).collect()).unwrap(), 50.0).unwrap();
        let w = window_split(&clip, 100, Some(&feats), 0).unwrap();
        let a1 = w[1].audio_cur.as_ref().unwrap();
        assert_eq!(a1.rows(), 200);
        assert_eq!(a1.at(0, 0), 201.0);
        assert_eq!(a1.at(99, 0), 300.0);
        assert_eq!(a1.at(100, 0), 0.0);
    }

    proptest! {
        #[test]
        fn windows_reassemble_and_chain(f in 1usize..400, k in 2usize..120, seed in 0u64..50) {
            let clip = ramp(f);
            let w = window_split(&clip, k, None, seed).unwrap();
            let cur: Vec<MotionWindow> = w.iter().map(|s| s.cur.clone()).collect();
            prop_assert_eq!(MotionClip::from_windows(&cur, f).unwrap(), clip);
            for pair in w.windows(2) {
                prop_assert_eq!(&pair[1].prev, &pair[0].cur);
            }
            for s in &w {
                prop_assert_eq!(s.style_src.len(), k);
            }
        }
    }
}
