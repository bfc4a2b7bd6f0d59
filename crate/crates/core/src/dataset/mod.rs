//! Motion clips, windowing into `(previous, current)` pairs, and the
//! deterministic synthetic corpus used for desk-scale training.

mod clip;
mod corpus;
mod synth;
mod window;

pub use clip::{read_motion, write_motion, MotionClip};
pub use corpus::{clip_name, read_corpus, write_corpus, Corpus, Manifest, BASIS_FILE, MANIFEST, MASK_FILE};
pub use synth::{synth_generate, SynthClip, SynthConfig};
pub use window::{window_split, WindowedSample, FEATURES_PER_FRAME};

/// Pearson correlation of two equal-length series.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (x, y) = (a[i] - ma, b[i] - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}
