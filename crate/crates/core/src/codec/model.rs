use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{loss_on_tape, LossVars};
use super::quantize::{lookup, quantize_on_tape, Frozen};
use super::{Codebook, CodecConfig, TokenPyramid};
use crate::error::{dim_err, Result};
use crate::motion::{MotionWindow, VertexModel, MOTION_DIM};
use crate::nn::{sinusoidal, window_mask, Block, Linear, Norm};
use crate::numerics::{AttnMask, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Parameter layout of the codec. Holds ids into a [`ParamStore`] so the
/// same layout serves `f32` training and `f64` checking.
#[derive(Clone, Debug)]
pub struct Codec {
    cfg: CodecConfig,
    enc_in: Linear,
    enc: Vec<Block>,
    enc_norm: Norm,
    enc_out: Linear,
    codebook: ParamId,
    phi: Linear,
    dec_ctx: Linear,
    dec_in: Linear,
    dec: Vec<Block>,
    dec_norm: Norm,
    dec_out: Linear,
}

/// Everything one training forward pass produces.
pub struct CodecForward {
    pub m_hat: Var,
    pub latent: Var,
    pub decoder_input: Var,
    pub tokens: TokenPyramid,
    pub loss: LossVars,
}

impl Codec {
    pub fn new<T: Real>(cfg: &CodecConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, ff) = (cfg.hidden, cfg.hidden * cfg.ff_mult);
        let enc_in = Linear::new(store, "enc.in", MOTION_DIM, h, true, &mut rng);
        let enc = (0..cfg.enc_layers).map(|i| Block::new(store, &format!("enc.{i}"), h, cfg.heads, ff, None, &mut rng)).collect();
        let enc_norm = Norm::new(store, "enc.norm", h);
        let enc_out = Linear::new(store, "enc.out", h, cfg.latent, true, &mut rng);
        let b = 1.0 / cfg.codebook_size as f64;
        let codebook = store.add("codebook", Tensor::uniform(&[cfg.codebook_size, cfg.latent], -b, b, &mut rng));
        let phi = Linear::identity(store, "phi", cfg.latent);
        let dec_ctx = Linear::new(store, "dec.ctx", MOTION_DIM, h, true, &mut rng);
        let dec_in = Linear::new(store, "dec.in", cfg.latent, h, true, &mut rng);
        let dec = (0..cfg.dec_layers).map(|i| Block::new(store, &format!("dec.{i}"), h, cfg.heads, ff, None, &mut rng)).collect();
        let dec_norm = Norm::new(store, "dec.norm", h);
        let dec_out = Linear::with_std(store, "dec.out", h, MOTION_DIM, true, 0.1 / (h as f64).sqrt(), &mut rng);
        Ok(Codec { cfg: cfg.clone(), enc_in, enc, enc_norm, enc_out, codebook, phi, dec_ctx, dec_in, dec, dec_norm, dec_out })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn codebook_id(&self) -> ParamId {
        self.codebook
    }

    fn check_window<T: Real>(&self, t: &Tensor<T>, what: &str) -> Result<()> {
        if t.rows() != self.cfg.window() || t.cols() != MOTION_DIM {
            return Err(dim_err!("{what} window is {:?}, expected {} x {}", t.shape(), self.cfg.window(), MOTION_DIM));
        }
        Ok(())
    }

    fn stack<T: Real>(&self, tape: &mut Tape<'_, T>, ctx: Option<Var>, x: Var) -> Result<(Var, AttnMask)> {
        let k = self.cfg.window();
        let (x, mask) = match ctx {
            Some(c) if self.cfg.temporal => (tape.concat_rows(&[c, x])?, window_mask(k)),
            _ => (x, AttnMask::full(k, k)),
        };
        let n = tape.value(x).rows();
        let pe = tape.constant(sinusoidal(n, self.cfg.hidden));
        Ok((tape.add(x, pe)?, mask))
    }

    /// Encoder over `[prev ‖ cur]`; returns the `K x d` latents of `cur`
    /// and, if asked, the hidden rows after every layer.
    pub fn encode_on_tape<T: Real>(&self, tape: &mut Tape<'_, T>, prev: Var, cur: Var, trace: Option<&mut Vec<Var>>) -> Result<Var> {
        let k = self.cfg.window();
        let xp = self.enc_in.forward(tape, prev)?;
        let xc = self.enc_in.forward(tape, cur)?;
        let (mut x, mask) = self.stack(tape, Some(xp), xc)?;
        let mut trace = trace;
        for b in &self.enc {
            x = b.forward(tape, x, &mask, None)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(x);
            }
        }
        let x = self.enc_norm.forward(tape, x)?;
        let n = tape.value(x).rows();
        let x = tape.slice_rows(x, n - k, n)?;
        self.enc_out.forward(tape, x)
    }

    pub fn phi_vars<T: Real>(&self, tape: &mut Tape<'_, T>) -> (Var, Var) {
        (tape.param(self.phi.w), tape.param(self.phi.b.expect("phi has a bias")))
    }

    /// Decoder from `x: K x d` and the context window's motion.
    pub fn decode_on_tape<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, ctx: Var) -> Result<Var> {
        let k = self.cfg.window();
        let xi = self.dec_in.forward(tape, x)?;
        let xc = self.dec_ctx.forward(tape, ctx)?;
        let (mut h, mask) = self.stack(tape, Some(xc), xi)?;
        for b in &self.dec {
            h = b.forward(tape, h, &mask, None)?;
        }
        let h = self.dec_norm.forward(tape, h)?;
        let n = tape.value(h).rows();
        let h = tape.slice_rows(h, n - k, n)?;
        self.dec_out.forward(tape, h)
    }

    /// Full stage-1 pass: encode, quantize, decode with the ground-truth
    /// previous window as context, and the loss against `cur`.
    pub fn forward_train<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        prev: &Tensor<T>,
        cur: &Tensor<T>,
        vertices: &VertexModel<T>,
        lips: &[usize],
        frozen: &mut Frozen<T>,
    ) -> Result<CodecForward> {
        self.check_window(prev, "previous")?;
        self.check_window(cur, "current")?;
        let p = tape.constant(prev.clone());
        let c = tape.constant(cur.clone());
        let latent = self.encode_on_tape(tape, p, c, None)?;
        let cb = tape.param(self.codebook);
        let phi = self.phi_vars(tape);
        let q = quantize_on_tape(tape, latent, cb, Some(phi), &self.cfg.schedule, T::lit(self.cfg.loss.beta_commit), frozen)?;
        // straight-through: value of h_hat, gradient of the latent
        let sg = frozen.stop(tape, latent);
        let st = tape.sub(latent, sg)?;
        let x = tape.add(q.h_hat, st)?;
        let m_hat = self.decode_on_tape(tape, x, p)?;
        let v_hat = vertices.vertices_on_tape(tape, m_hat)?;
        let v = tape.constant(vertices.vertices(cur)?);
        let loss = loss_on_tape(tape, m_hat, c, v_hat, v, lips, Some(q.cb_loss), &self.cfg.loss)?;
        Ok(CodecForward { m_hat, latent, decoder_input: x, tokens: q.tokens, loss })
    }
}

/// A codec together with its `f32` parameters, for inference.
#[derive(Clone, Debug)]
pub struct CodecModel {
    pub codec: Codec,
    pub store: ParamStore<f32>,
}

impl CodecModel {
    pub fn new(cfg: &CodecConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let codec = Codec::new(cfg, &mut store, seed)?;
        Ok(CodecModel { codec, store })
    }

    /// Rebuilds from named tensors (without the `codec.` prefix).
    pub fn from_named(cfg: &CodecConfig, named: &BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        m.store.load_named(named)?;
        Ok(m)
    }

    pub fn config(&self) -> &CodecConfig {
        self.codec.config()
    }

    pub fn codebook(&self) -> Result<Codebook> {
        Codebook::new(self.store.value(self.codec.codebook).clone())
    }

    pub fn codebook_tensor(&self) -> &Tensor<f32> {
        self.store.value(self.codec.codebook)
    }

    fn phi(&self) -> (&Tensor<f32>, &Tensor<f32>) {
        let p = &self.codec.phi;
        (self.store.value(p.w), self.store.value(p.b.expect("phi has a bias")))
    }

    pub fn encode(&self, prev: &MotionWindow, cur: &MotionWindow) -> Result<Tensor<f32>> {
        self.encoder_pass(prev, cur, false).map(|(r, _)| r)
    }

    /// Encoder hidden rows after every layer, `2K x hidden` each.
    pub fn encoder_activations(&self, prev: &MotionWindow, cur: &MotionWindow) -> Result<Vec<Tensor<f32>>> {
        self.encoder_pass(prev, cur, true).map(|(_, a)| a)
    }

    fn encoder_pass(&self, prev: &MotionWindow, cur: &MotionWindow, want: bool) -> Result<(Tensor<f32>, Vec<Tensor<f32>>)> {
        self.codec.check_window(prev.frames(), "previous")?;
        self.codec.check_window(cur.frames(), "current")?;
        let mut tape = Tape::new(&self.store);
        let p = tape.constant(prev.frames().clone());
        let c = tape.constant(cur.frames().clone());
        let mut trace = Vec::new();
        let r = self.codec.encode_on_tape(&mut tape, p, c, want.then_some(&mut trace))?;
        Ok((tape.value(r).clone(), trace.into_iter().map(|v| tape.value(v).clone()).collect()))
    }

    pub fn quantize(&self, r0: &Tensor<f32>) -> Result<super::Quantized> {
        super::quantize_multiscale(r0, &self.codebook()?, &self.config().schedule, Some(self.phi()))
    }

    pub fn tokenize(&self, prev: &MotionWindow, cur: &MotionWindow) -> Result<TokenPyramid> {
        Ok(self.quantize(&self.encode(prev, cur)?)?.tokens)
    }

    /// `h^(l)` of every scale for a token pyramid.
    pub fn scale_codes(&self, tokens: &TokenPyramid) -> Result<Vec<Tensor<f32>>> {
        let cfg = self.config();
        tokens.validate(&cfg.schedule, cfg.codebook_size)?;
        let k = cfg.window();
        tokens.scales.iter().map(|z| super::interp_up(&lookup(self.codebook_tensor(), z), k, Some(self.phi()))).collect()
    }

    /// `h` for one scale's tokens.
    pub fn code(&self, z: &[usize]) -> Result<Tensor<f32>> {
        if let Some(&bad) = z.iter().find(|&&t| t >= self.config().codebook_size) {
            return Err(crate::error::contract_err!("token {bad} outside codebook of {}", self.config().codebook_size));
        }
        super::interp_up(&lookup(self.codebook_tensor(), z), self.config().window(), Some(self.phi()))
    }

    /// Reconstructs a window from tokens and the preceding window.
    pub fn decode(&self, tokens: &TokenPyramid, ctx: &MotionWindow) -> Result<MotionWindow> {
        self.codec.check_window(ctx.frames(), "context")?;
        let codes = self.scale_codes(tokens)?;
        let mut h_hat = codes[0].clone();
        for c in &codes[1..] {
            h_hat.add_assign(c);
        }
        let store = &self.store;
        let mut tape = Tape::new(store);
        let x = tape.constant(h_hat);
        let c = tape.constant(ctx.frames().clone());
        let m = self.codec.decode_on_tape(&mut tape, x, c)?;
        MotionWindow::new(tape.value(m).clone())
    }

    /// Encode, quantize and decode with `prev` as the decoder context.
    pub fn reconstruct(&self, prev: &MotionWindow, cur: &MotionWindow) -> Result<MotionWindow> {
        let tokens = self.tokenize(prev, cur)?;
        self.decode(&tokens, prev)
    }

    /// Tensors under the `codec.` namespace.
    pub fn to_named(&self) -> Vec<(String, Tensor<f32>)> {
        crate::checkpoint::prefixed(&self.store, "codec.")
    }
}
