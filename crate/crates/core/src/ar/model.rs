use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{build_block_mask, ArConfig};
use crate::audio::resample_to_scale;
use crate::codec::{interp_down, CodecConfig, ScaleSchedule, TokenPyramid};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::motion::{MotionWindow, MOTION_DIM};
use crate::nn::{sinusoidal, Block, Linear, Norm};
use crate::numerics::{AttnMask, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Per-dimension standardisation of audio features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNorm {
    pub mean: Tensor<f32>,
    pub std: Tensor<f32>,
}

impl FeatureNorm {
    pub fn identity(dim: usize) -> Self {
        FeatureNorm { mean: Tensor::zeros(&[1, dim]), std: Tensor::full(&[1, dim], 1.0) }
    }

    /// Mean and standard deviation over all rows of all sequences.
    pub fn fit(seqs: &[&Tensor<f32>]) -> Result<Self> {
        let dim = seqs.first().ok_or_else(|| contract_err!("no features to fit"))?.cols();
        let (mut s, mut s2, mut n) = (vec![0.0f64; dim], vec![0.0f64; dim], 0usize);
        for t in seqs {
            if t.cols() != dim {
                return Err(dim_err!("feature widths differ: {} vs {dim}", t.cols()));
            }
            for r in 0..t.rows() {
                for (i, &v) in t.row(r).iter().enumerate() {
                    s[i] += v as f64;
                    s2[i] += (v as f64).powi(2);
                }
            }
            n += t.rows();
        }
        if n == 0 {
            return Err(contract_err!("no feature frames to fit"));
        }
        let mean: Vec<f32> = s.iter().map(|v| (v / n as f64) as f32).collect();
        let std: Vec<f32> = s2.iter().zip(&s).map(|(q, v)| ((q / n as f64 - (v / n as f64).powi(2)).max(0.0).sqrt().max(1e-3)) as f32).collect();
        Ok(FeatureNorm { mean: Tensor::new(vec![1, dim], mean)?, std: Tensor::new(vec![1, dim], std)? })
    }

    pub fn apply(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        if x.cols() != self.mean.cols() {
            return Err(dim_err!("features have {} columns, normaliser {}", x.cols(), self.mean.cols()));
        }
        let mut y = x.clone();
        for r in 0..y.rows() {
            for ((v, &m), &s) in y.row_mut(r).iter_mut().zip(self.mean.data()).zip(self.std.data()) {
                *v = (*v - m) / s;
            }
        }
        Ok(y)
    }
}

/// Everything the network reads for one window besides the style token.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowInputs<T> {
    /// Finest tokens of the previous window; `None` for the first window.
    pub prev_tokens: Option<Vec<usize>>,
    /// Block inputs per scale, `k_l x d`; entry 0 is unused (block 1 reads
    /// a learned start embedding).
    pub blocks: Vec<Tensor<T>>,
    /// Standardised audio resampled to each scale and stacked, `Σk x D_a`.
    pub cond: Tensor<T>,
}

impl WindowInputs<f32> {
    pub fn new(
        norm: &FeatureNorm,
        audio: &Tensor<f32>,
        sched: &ScaleSchedule,
        blocks: Vec<Tensor<f32>>,
        prev_tokens: Option<Vec<usize>>,
    ) -> Result<Self> {
        let a = norm.apply(audio)?;
        let parts = sched.lengths().iter().map(|&k| resample_to_scale(&a, k)).collect::<Result<Vec<_>>>()?;
        let cond = Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())?;
        Ok(WindowInputs { prev_tokens, blocks, cond })
    }

    pub fn cast<U: Real>(&self) -> WindowInputs<U> {
        WindowInputs { prev_tokens: self.prev_tokens.clone(), blocks: self.blocks.iter().map(|b| b.cast()).collect(), cond: self.cast_cond() }
    }

    fn cast_cond<U: Real>(&self) -> Tensor<U> {
        self.cond.cast()
    }
}

/// Block inputs from per-scale codes `h^(l)`: scale `l` reads the sum of
/// the coarser codes resampled to `k_l` rows. With codes for the first `n`
/// scales, inputs for blocks `0..=n` are returned.
pub fn block_inputs(codes: &[Tensor<f32>], sched: &ScaleSchedule) -> Result<Vec<Tensor<f32>>> {
    let ks = sched.lengths();
    if codes.is_empty() || codes.len() > ks.len() {
        return Err(dim_err!("{} code tensors for {} scales", codes.len(), ks.len()));
    }
    let d = codes[0].cols();
    let mut out = vec![Tensor::zeros(&[ks[0], d])];
    let mut acc = codes[0].clone();
    for l in 1..ks.len().min(codes.len() + 1) {
        out.push(interp_down(&acc, ks[l])?);
        if l < codes.len() {
            acc.add_assign(&codes[l]);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct StyleEncoder {
    input: Linear,
    blocks: Vec<Block>,
    norm: Norm,
    out: Linear,
}

/// Parameter layout of the AR model.
#[derive(Clone, Debug)]
pub struct ArNet {
    cfg: ArConfig,
    sched: ScaleSchedule,
    latent: usize,
    valid_vocab: usize,
    style: Option<StyleEncoder>,
    style_const: ParamId,
    style_in: Linear,
    tok_emb: ParamId,
    neutral: ParamId,
    start: ParamId,
    block_in: Linear,
    scale_emb: ParamId,
    cond_in: Linear,
    blocks: Vec<Block>,
    norm: Norm,
    head: Linear,
    mask: AttnMask,
}

impl ArNet {
    pub fn new<T: Real>(cfg: &ArConfig, codec: &CodecConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if codec.codebook_size > cfg.vocab {
            return Err(contract_err!("codebook of {} exceeds vocabulary {}", codec.codebook_size, cfg.vocab));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sched = codec.schedule.clone();
        let (d, ff) = (cfg.dim, cfg.dim * cfg.ff_mult);
        let style = cfg.use_style.then(|| StyleEncoder {
            input: Linear::new(store, "style.in", MOTION_DIM, d, true, &mut rng),
            blocks: (0..cfg.style_layers).map(|i| Block::new(store, &format!("style.{i}"), d, cfg.heads, ff, None, &mut rng)).collect(),
            norm: Norm::new(store, "style.norm", d),
            out: Linear::new(store, "style.out", d, cfg.cond_dim, true, &mut rng),
        });
        let style_const = store.add("style_const", Tensor::randn(&[1, cfg.cond_dim], 0.02, &mut rng));
        let style_in = Linear::new(store, "style_slot", cfg.cond_dim, d, true, &mut rng);
        let tok_emb = store.add("tok_emb", Tensor::randn(&[cfg.vocab, d], 0.5, &mut rng));
        let neutral = store.add("neutral", Tensor::randn(&[sched.window(), d], 0.5, &mut rng));
        let start = store.add("start", Tensor::randn(&[1, d], 0.5, &mut rng));
        let block_in = Linear::new(store, "block_in", codec.latent, d, true, &mut rng);
        let scale_emb = store.add("scale_emb", Tensor::randn(&[sched.num_scales(), d], 0.5, &mut rng));
        let cond_in = Linear::new(store, "cond_in", cfg.feat_dim, cfg.cond_dim, true, &mut rng);
        let blocks = (0..cfg.layers).map(|i| Block::new(store, &format!("layer.{i}"), d, cfg.heads, ff, Some(cfg.cond_dim), &mut rng)).collect();
        let norm = Norm::new(store, "norm", d);
        let head = Linear::with_std(store, "head", d, cfg.vocab, true, 1e-3, &mut rng);
        let mask = build_block_mask(&sched, cfg.prefix_len(&sched));
        Ok(ArNet {
            cfg: cfg.clone(),
            sched,
            latent: codec.latent,
            valid_vocab: codec.codebook_size,
            style,
            style_const,
            style_in,
            tok_emb,
            neutral,
            start,
            block_in,
            scale_emb,
            cond_in,
            blocks,
            norm,
            head,
            mask,
        })
    }

    pub fn config(&self) -> &ArConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.sched
    }

    /// Tokens `>= valid_vocab` never occur in codec output.
    pub fn valid_vocab(&self) -> usize {
        self.valid_vocab
    }

    pub fn prefix_len(&self) -> usize {
        self.cfg.prefix_len(&self.sched)
    }

    /// Parameters of the style encoder, for freezing.
    pub fn is_style_param(name: &str) -> bool {
        name.starts_with("style.")
    }

    /// Style token `1 x cond_dim` from an example window, or the learned
    /// constant when the encoder is disabled.
    pub fn style_on_tape<T: Real>(&self, tape: &mut Tape<'_, T>, example: &Tensor<T>) -> Result<Var> {
        let k = self.sched.window();
        if example.rows() != k || example.cols() != MOTION_DIM {
            return Err(dim_err!("style example is {:?}, expected {k} x {MOTION_DIM}", example.shape()));
        }
        let Some(enc) = &self.style else {
            return Ok(tape.param(self.style_const));
        };
        let x = tape.constant(example.clone());
        let x = enc.input.forward(tape, x)?;
        let pe = tape.constant(sinusoidal(k, self.cfg.dim));
        let mut x = tape.add(x, pe)?;
        let full = AttnMask::full(k, k);
        for b in &enc.blocks {
            x = b.forward(tape, x, &full, None)?;
        }
        let x = enc.norm.forward(tape, x)?;
        let x = tape.mean_rows(x);
        enc.out.forward(tape, x)
    }

    fn check_inputs<T: Real>(&self, inp: &WindowInputs<T>, n_blocks: usize) -> Result<()> {
        let ks = self.sched.lengths();
        if n_blocks == 0 || n_blocks > ks.len() {
            return Err(contract_err!("cannot run {n_blocks} of {} blocks", ks.len()));
        }
        if inp.blocks.len() < n_blocks {
            return Err(dim_err!("{} block inputs for {n_blocks} blocks", inp.blocks.len()));
        }
        for l in 1..n_blocks {
            if inp.blocks[l].shape() != [ks[l], self.latent] {
                return Err(dim_err!("block {l} input {:?}, expected {} x {}", inp.blocks[l].shape(), ks[l], self.latent));
            }
        }
        if inp.cond.rows() != self.sched.total() || inp.cond.cols() != self.cfg.feat_dim {
            return Err(dim_err!("condition {:?}, expected {} x {}", inp.cond.shape(), self.sched.total(), self.cfg.feat_dim));
        }
        if self.cfg.temporal {
            if let Some(p) = &inp.prev_tokens {
                if p.len() != self.sched.window() {
                    return Err(dim_err!("{} previous tokens, expected {}", p.len(), self.sched.window()));
                }
            }
        }
        Ok(())
    }

    /// Logits for the first `n_blocks` blocks, `Σ_{l<n} k_l x vocab`.
    pub fn logits_on_tape<T: Real>(&self, tape: &mut Tape<'_, T>, inp: &WindowInputs<T>, style: Var, n_blocks: usize) -> Result<Var> {
        self.check_inputs(inp, n_blocks)?;
        let ks = self.sched.lengths();
        let prefix = self.prefix_len();
        let mut rows = vec![self.style_in.forward(tape, style)?];
        if self.cfg.temporal {
            rows.push(match &inp.prev_tokens {
                Some(p) => {
                    let table = tape.param(self.tok_emb);
                    tape.gather_rows(table, p)?
                }
                None => tape.param(self.neutral),
            });
        }
        let scale = tape.param(self.scale_emb);
        for (l, &k) in ks.iter().enumerate().take(n_blocks) {
            let x = if l == 0 {
                let s = tape.param(self.start);
                tape.gather_rows(s, &vec![0; k])?
            } else {
                let b = tape.constant(inp.blocks[l].clone());
                self.block_in.forward(tape, b)?
            };
            let e = tape.gather_rows(scale, &vec![l; k])?;
            rows.push(tape.add(x, e)?);
        }
        let x = tape.concat_rows(&rows)?;
        let n = tape.value(x).rows();
        let pe = tape.constant(sinusoidal(n, self.cfg.dim));
        let mut x = tape.add(x, pe)?;

        let used: usize = ks[..n_blocks].iter().sum();
        let a = tape.constant(inp.cond.slice_rows(0, used));
        let c = self.cond_in.forward(tape, a)?;
        let c = tape.gelu(c);
        let zeros = tape.constant(Tensor::zeros(&[prefix, self.cfg.cond_dim]));
        let cond = tape.concat_rows(&[zeros, c])?;

        let mask = if n == self.mask.rows() { self.mask.clone() } else { self.mask.truncate(n, n)? };
        for b in &self.blocks {
            x = b.forward(tape, x, &mask, Some(cond))?;
        }
        let x = self.norm.forward(tape, x)?;
        let x = tape.slice_rows(x, prefix, n)?;
        self.head.forward(tape, x)
    }

    /// Teacher-forced cross-entropy over all positions; returns the loss
    /// and the logits.
    pub fn loss_on_tape<T: Real>(&self, tape: &mut Tape<'_, T>, inp: &WindowInputs<T>, style: Var, target: &TokenPyramid) -> Result<(Var, Var)> {
        if target.scales.len() != self.sched.num_scales() {
            return Err(dim_err!("target pyramid has {} scales", target.scales.len()));
        }
        let logits = self.logits_on_tape(tape, inp, style, self.sched.num_scales())?;
        let loss = tape.cross_entropy(logits, &target.flat())?;
        Ok((loss, logits))
    }
}

/// Index of the largest logit among the first `valid` entries.
pub(crate) fn argmax_valid<T: Real>(row: &[T], valid: usize) -> usize {
    let mut best = 0;
    for j in 1..valid.min(row.len()) {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of correct argmax predictions per scale.
pub fn accuracy_per_scale<T: Real>(logits: &Tensor<T>, target: &TokenPyramid, valid: usize) -> Vec<f64> {
    let mut row = 0;
    target
        .scales
        .iter()
        .map(|z| {
            let hit = z.iter().filter(|&&t| {
                let ok = argmax_valid(logits.row(row), valid) == t;
                row += 1;
                ok
            });
            hit.count() as f64 / z.len() as f64
        })
        .collect()
}

/// A style token, `1 x cond_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleToken(pub Tensor<f32>);

/// AR network with its `f32` parameters and feature normaliser.
#[derive(Clone, Debug)]
pub struct ArModel {
    pub net: ArNet,
    pub store: ParamStore<f32>,
    pub norm: FeatureNorm,
}

impl ArModel {
    pub fn new(cfg: &ArConfig, codec: &CodecConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = ArNet::new(cfg, codec, &mut store, seed)?;
        Ok(ArModel { net, store, norm: FeatureNorm::identity(cfg.feat_dim) })
    }

    /// Rebuilds from tensors without the `ar.` prefix.
    pub fn from_named(cfg: &ArConfig, codec: &CodecConfig, named: &BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        let mut m = Self::new(cfg, codec, 0)?;
        m.store.load_named(named)?;
        let get = |n: &str| named.get(n).cloned().ok_or_else(|| Error::State(format!("checkpoint lacks `ar.{n}`")));
        m.norm = FeatureNorm { mean: get("feat_mean")?, std: get("feat_std")? };
        if m.norm.mean.shape() != [1, cfg.feat_dim] || m.norm.std.shape() != [1, cfg.feat_dim] {
            return Err(dim_err!("feature normaliser does not match {} features", cfg.feat_dim));
        }
        Ok(m)
    }

    pub fn to_named(&self) -> Vec<(String, Tensor<f32>)> {
        let mut t = crate::checkpoint::prefixed(&self.store, "ar.");
        t.push(("ar.feat_mean".into(), self.norm.mean.clone()));
        t.push(("ar.feat_std".into(), self.norm.std.clone()));
        t
    }

    pub fn config(&self) -> &ArConfig {
        self.net.config()
    }

    pub fn style_encode(&self, example: &MotionWindow) -> Result<StyleToken> {
        let mut tape = Tape::new(&self.store);
        let s = self.net.style_on_tape(&mut tape, example.frames())?;
        Ok(StyleToken(tape.value(s).clone()))
    }

    /// Teacher-forced logits for every block, `Σk x vocab`.
    pub fn forward_logits(&self, inp: &WindowInputs<f32>, style: &StyleToken) -> Result<Tensor<f32>> {
        self.logits_prefix(inp, style, self.net.schedule().num_scales())
    }

    /// Logits of the first `n_blocks` blocks from a truncated pass.
    pub fn logits_prefix(&self, inp: &WindowInputs<f32>, style: &StyleToken, n_blocks: usize) -> Result<Tensor<f32>> {
        if style.0.shape() != [1, self.config().cond_dim] {
            return Err(dim_err!("style token {:?}, expected 1 x {}", style.0.shape(), self.config().cond_dim));
        }
        let mut tape = Tape::new(&self.store);
        let s = tape.constant(style.0.clone());
        let l = self.net.logits_on_tape(&mut tape, inp, s, n_blocks)?;
        Ok(tape.value(l).clone())
    }
}

/// Mean softmax cross-entropy of `logits` rows against `targets`.
pub fn ar_loss<T: Real>(logits: &Tensor<T>, targets: &TokenPyramid) -> Result<f64> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let l = tape.constant(logits.clone());
    let v = tape.cross_entropy(l, &targets.flat())?;
    Ok(tape.scalar(v).as_f64())
}
