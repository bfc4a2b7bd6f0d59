//! Transformer building blocks recorded on a [`Tape`].

use rand::Rng;

use crate::error::Result;
use crate::numerics::{AttnMask, ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        Self::with_std(store, name, fan_in, fan_out, bias, 1.0 / (fan_in as f64).sqrt(), rng)
    }

    pub fn with_std<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out])));
        Linear { w, b }
    }

    /// Square map initialised to the identity.
    pub fn identity<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::identity(dim));
        let b = Some(store.add(format!("{name}.b"), Tensor::zeros(&[1, dim])));
        Linear { w, b }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = self.b.map(|b| tape.param(b));
        tape.linear(x, w, b)
    }
}

/// Row normalisation with a learned gain and bias.
#[derive(Clone, Debug)]
pub struct Norm {
    g: ParamId,
    b: ParamId,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let g = store.add(format!("{name}.g"), Tensor::full(&[1, dim], T::one()));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, dim]));
        Norm { g, b }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let n = tape.normalize_rows(x);
        let g = tape.param(self.g);
        let b = tape.param(self.b);
        let y = tape.mul_row(n, g)?;
        tape.add_row(y, b)
    }
}

/// Normalisation modulated per row by a condition: `n * (1 + gamma) + beta`.
#[derive(Clone, Debug)]
pub struct AdaNorm {
    proj: Linear,
    dim: usize,
}

impl AdaNorm {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cond_dim: usize, dim: usize, rng: &mut R) -> Self {
        AdaNorm { proj: Linear::with_std(store, name, cond_dim, 2 * dim, true, 0.02, rng), dim }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, cond: Var) -> Result<Var> {
        let n = tape.normalize_rows(x);
        let gb = self.proj.forward(tape, cond)?;
        let gamma = tape.slice_cols(gb, 0, self.dim)?;
        let beta = tape.slice_cols(gb, self.dim, 2 * self.dim)?;
        let ng = tape.mul(n, gamma)?;
        let y = tape.add(n, ng)?;
        tape.add(y, beta)
    }
}

#[derive(Clone, Debug)]
enum BlockNorm {
    Plain(Norm, Norm),
    Adaptive(AdaNorm, AdaNorm),
}

/// Pre-norm transformer layer: attention then a GELU feed-forward.
#[derive(Clone, Debug)]
pub struct Block {
    norms: BlockNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    f1: Linear,
    f2: Linear,
    heads: usize,
}

impl Block {
    /// A layer with plain norms, or AdaIN norms when `cond_dim` is given.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ff: usize,
        cond_dim: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let norms = match cond_dim {
            None => BlockNorm::Plain(Norm::new(store, &format!("{name}.n1"), dim), Norm::new(store, &format!("{name}.n2"), dim)),
            Some(c) => BlockNorm::Adaptive(
                AdaNorm::new(store, &format!("{name}.ada1"), c, dim, rng),
                AdaNorm::new(store, &format!("{name}.ada2"), c, dim, rng),
            ),
        };
        let out_std = 0.5 / (dim as f64).sqrt();
        Block {
            norms,
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            o: Linear::with_std(store, &format!("{name}.o"), dim, dim, true, out_std, rng),
            f1: Linear::new(store, &format!("{name}.f1"), dim, ff, true, rng),
            f2: Linear::with_std(store, &format!("{name}.f2"), ff, dim, true, 0.5 / (ff as f64).sqrt(), rng),
            heads,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, mask: &AttnMask, cond: Option<Var>) -> Result<Var> {
        let h = self.norm(tape, x, cond, 0)?;
        let (q, k, v) = (self.q.forward(tape, h)?, self.k.forward(tape, h)?, self.v.forward(tape, h)?);
        let a = tape.attention(q, k, v, mask, self.heads)?;
        let a = self.o.forward(tape, a)?;
        let x = tape.add(x, a)?;
        let h = self.norm(tape, x, cond, 1)?;
        let f = self.f1.forward(tape, h)?;
        let f = tape.gelu(f);
        let f = self.f2.forward(tape, f)?;
        tape.add(x, f)
    }

    fn norm<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, cond: Option<Var>, which: usize) -> Result<Var> {
        match (&self.norms, cond) {
            (BlockNorm::Plain(a, b), _) => if which == 0 { a } else { b }.forward(tape, x),
            (BlockNorm::Adaptive(a, b), Some(c)) => if which == 0 { a } else { b }.forward(tape, x, c),
            (BlockNorm::Adaptive(..), None) => Err(crate::error::contract_err!("adaptive layer needs a condition")),
        }
    }
}

/// Fixed sinusoidal position table, `n x dim`.
pub fn sinusoidal<T: Real>(n: usize, dim: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[n, dim]);
    for p in 0..n {
        for i in 0..dim {
            let freq = (10000f64).powf(-((i / 2 * 2) as f64) / dim as f64);
            let a = p as f64 * freq;
            t.row_mut(p)[i] = T::lit(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    t
}

/// Two consecutive windows of `k` rows: the first attends only itself,
/// the second attends both.
pub fn window_mask(k: usize) -> AttnMask {
    AttnMask::from_fn(2 * k, 2 * k, |i, j| i >= k || j < k).expect("no empty rows")
}
