//! Two-level autoregressive token model: windows follow each other in time,
//! and within a window the scales of the token pyramid are predicted
//! coarse to fine, each scale's block in one parallel step.

mod generate;
mod model;

use serde::{Deserialize, Serialize};

use crate::codec::ScaleSchedule;
use crate::error::{contract_err, Result};
use crate::numerics::AttnMask;

pub use generate::{generate_stream, generate_window, DecodeMode, Stream};
pub use model::{accuracy_per_scale, ar_loss, block_inputs, ArModel, ArNet, FeatureNorm, StyleToken, WindowInputs};

/// Width, depth and ablation switches of the AR model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub cond_dim: usize,
    pub vocab: usize,
    pub feat_dim: usize,
    pub ff_mult: usize,
    pub style_layers: usize,
    /// Prefix carries the previous window's finest tokens.
    pub temporal: bool,
    /// Use the style encoder; otherwise a learned constant token.
    pub use_style: bool,
}

impl ArConfig {
    /// 12 layers, 12 heads, width 768.
    pub fn paper() -> Self {
        ArConfig {
            dim: 768,
            heads: 12,
            layers: 12,
            cond_dim: 768,
            vocab: 256,
            feat_dim: crate::audio::LogMelConfig::default().n_mels,
            ff_mult: 4,
            style_layers: 2,
            temporal: true,
            use_style: true,
        }
    }

    pub fn desk() -> Self {
        ArConfig { dim: 64, heads: 4, layers: 3, cond_dim: 64, style_layers: 1, ..Self::paper() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(contract_err!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.vocab == 0 || self.cond_dim == 0 || self.feat_dim == 0 || self.ff_mult == 0 {
            return Err(contract_err!("vocab, condition, feature and ff sizes must be positive"));
        }
        Ok(())
    }

    /// Style slot plus, with temporal context, `k_L` previous tokens.
    pub fn prefix_len(&self, sched: &ScaleSchedule) -> usize {
        1 + if self.temporal { sched.window() } else { 0 }
    }
}

/// Block-causal attention over `[prefix ‖ block_1 ‖ … ‖ block_L]`.
///
/// The prefix is causal among itself. A block row sees the whole prefix and
/// every row of its own and earlier blocks.
pub fn build_block_mask(sched: &ScaleSchedule, prefix: usize) -> AttnMask {
    let n = prefix + sched.total();
    let mut block = vec![0usize; n];
    for (l, (&o, &k)) in sched.offsets().iter().zip(sched.lengths()).enumerate() {
        for b in &mut block[prefix + o..prefix + o + k] {
            *b = l;
        }
    }
    AttnMask::from_fn(n, n, |i, j| {
        if i < prefix {
            j <= i
        } else {
            j < prefix || block[j] <= block[i]
        }
    })
    .expect("every row sees itself")
}

#[cfg(test)]
mod mask_tests {
    use super::*;

    #[test]
    fn default_layout_has_side_282() {
        let s = ScaleSchedule::paper_default();
        let p = ArConfig::desk().prefix_len(&s);
        let m = build_block_mask(&s, p);
        assert_eq!((m.rows(), m.cols()), (282, 282));
        // block 1 is row 101, block 2 spans 102..107
        for j in 102..107 {
            assert!(!m.allowed(101, j));
        }
        for i in 101..282 {
            assert!((0..101).all(|j| m.allowed(i, j)));
        }
        assert!(m.allowed(103, 106) && m.allowed(106, 103));
        assert!(!m.allowed(0, 1) && m.allowed(5, 2));
        assert!(!m.allowed(150, 200) && m.allowed(200, 150));
    }

    #[test]
    fn no_row_sees_a_later_block() {
        let s = ScaleSchedule::new(vec![2, 3, 7]).unwrap();
        let m = build_block_mask(&s, 3);
        let block_of = |i: usize| if i < 3 { None } else if i < 5 { Some(0) } else if i < 8 { Some(1) } else { Some(2) };
        for i in 0..15 {
            for j in 0..15 {
                if let (Some(bi), Some(bj)) = (block_of(i), block_of(j)) {
                    assert_eq!(m.allowed(i, j), bj <= bi);
                }
                if block_of(i).is_none() && block_of(j).is_some() {
                    assert!(!m.allowed(i, j));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
