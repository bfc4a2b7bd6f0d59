use super::{Codebook, ScaleSchedule, TokenPyramid};
use crate::audio::{linear_matrix, region_mean_matrix};
use crate::error::{contract_err, dim_err, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Stop-gradient values and token choices of one forward pass.
///
/// In `Record` mode every stopped value and every nearest-entry choice is
/// saved; `Replay` substitutes the saved ones. Replaying turns the loss into
/// a smooth function of the parameters whose exact derivative is the
/// straight-through gradient, which is what finite differences can check.
#[derive(Clone, Debug, Default)]
pub struct Frozen<T> {
    mode: Mode,
    values: Vec<Tensor<T>>,
    tokens: Vec<Vec<usize>>,
    vi: usize,
    ti: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
enum Mode {
    #[default]
    Off,
    Record,
    Replay,
}

impl<T: Real> Frozen<T> {
    pub fn off() -> Self {
        Frozen::default()
    }

    pub fn record() -> Self {
        Frozen { mode: Mode::Record, ..Frozen::default() }
    }

    /// Switches a recording to replay from the start.
    pub fn into_replay(mut self) -> Self {
        self.mode = Mode::Replay;
        self.rewind();
        self
    }

    pub fn rewind(&mut self) {
        self.vi = 0;
        self.ti = 0;
    }

    pub(crate) fn stop(&mut self, tape: &mut Tape<'_, T>, v: Var) -> Var {
        match self.mode {
            Mode::Off => tape.detach(v),
            Mode::Record => {
                self.values.push(tape.value(v).clone());
                tape.detach(v)
            }
            Mode::Replay => {
                let t = self.values[self.vi].clone();
                self.vi += 1;
                tape.constant(t)
            }
        }
    }

    pub(crate) fn choose(&mut self, f: impl FnOnce() -> Vec<usize>) -> Vec<usize> {
        match self.mode {
            Mode::Off => f(),
            Mode::Record => {
                let z = f();
                self.tokens.push(z.clone());
                z
            }
            Mode::Replay => {
                let z = self.tokens[self.ti].clone();
                self.ti += 1;
                z
            }
        }
    }
}

/// Region means over `k` equal parts of the time axis.
pub fn interp_down<T: Real>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    if k == 0 || k > x.rows() {
        return Err(contract_err!("cannot downsample {} rows to {k}", x.rows()));
    }
    if k == x.rows() {
        return Ok(x.clone());
    }
    region_mean_matrix(x.rows(), k).matmul(x)
}

/// Endpoint-aligned linear interpolation to `big` rows, then `phi` per row.
pub fn interp_up<T: Real>(x: &Tensor<T>, big: usize, phi: Option<(&Tensor<T>, &Tensor<T>)>) -> Result<Tensor<T>> {
    if x.rows() == 0 || x.rows() > big {
        return Err(contract_err!("cannot upsample {} rows to {big}", x.rows()));
    }
    let up = if x.rows() == big { x.clone() } else { linear_matrix(x.rows(), big).matmul(x)? };
    match phi {
        None => Ok(up),
        Some((w, b)) => {
            let mut y = up.matmul(w)?;
            for r in 0..y.rows() {
                for (v, &bb) in y.row_mut(r).iter_mut().zip(b.data()) {
                    *v = *v + bb;
                }
            }
            Ok(y)
        }
    }
}

/// Index of the nearest row of `cb` for each row of `x`; ties go to the
/// lowest index.
pub(crate) fn nearest<T: Real>(x: &Tensor<T>, cb: &Tensor<T>) -> Vec<usize> {
    (0..x.rows())
        .map(|i| {
            let row = x.row(i);
            let mut best = (0, T::infinity());
            for j in 0..cb.rows() {
                let d: T = row.iter().zip(cb.row(j)).map(|(&a, &b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect()
}

/// Tape outputs of [`quantize_on_tape`].
pub struct QuantizeOutput {
    pub tokens: TokenPyramid,
    /// `Σ_l h^(l)`, differentiable in the codebook and `phi`.
    pub h_hat: Var,
    /// `r^L`; each step subtracts a stopped `h^(l)`.
    pub residual: Var,
    /// Codebook plus commitment terms summed over scales.
    pub cb_loss: Var,
}

fn down_on_tape<T: Real>(tape: &mut Tape<'_, T>, x: Var, k: usize) -> Result<Var> {
    let t = tape.value(x).rows();
    if k == t {
        return Ok(x);
    }
    let m = tape.constant(region_mean_matrix(t, k));
    tape.matmul(m, x)
}

/// Upsamples `k x d` codes to `big` rows and applies `phi`.
pub(crate) fn up_on_tape<T: Real>(tape: &mut Tape<'_, T>, e: Var, big: usize, phi: Option<(Var, Var)>) -> Result<Var> {
    let k = tape.value(e).rows();
    let up = if k == big {
        e
    } else {
        let m = tape.constant(linear_matrix(k, big));
        tape.matmul(m, e)?
    };
    match phi {
        None => Ok(up),
        Some((w, b)) => tape.linear(up, w, Some(b)),
    }
}

/// Residual quantization of `r0: K x d` over every scale of `sched`.
pub fn quantize_on_tape<T: Real>(
    tape: &mut Tape<'_, T>,
    r0: Var,
    codebook: Var,
    phi: Option<(Var, Var)>,
    sched: &ScaleSchedule,
    beta: T,
    frozen: &mut Frozen<T>,
) -> Result<QuantizeOutput> {
    let (big, d) = (tape.value(r0).rows(), tape.value(r0).cols());
    if big != sched.window() {
        return Err(dim_err!("latent has {big} rows, schedule ends at {}", sched.window()));
    }
    if tape.value(codebook).cols() != d {
        return Err(dim_err!("latent width {d}, codebook width {}", tape.value(codebook).cols()));
    }
    let mut r = r0;
    let mut h_hat: Option<Var> = None;
    let mut cb_terms = Vec::with_capacity(sched.num_scales());
    let mut scales = Vec::with_capacity(sched.num_scales());
    for &k in sched.lengths() {
        let down = down_on_tape(tape, r, k)?;
        let z = frozen.choose(|| nearest(tape.value(down), tape.value(codebook)));
        let e = tape.gather_rows(codebook, &z)?;
        let down_sg = frozen.stop(tape, down);
        let e_sg = frozen.stop(tape, e);
        let d1 = tape.sub(down_sg, e)?;
        let d2 = tape.sub(down, e_sg)?;
        let (l1, l2) = (tape.mean_sq(d1), tape.mean_sq(d2));
        cb_terms.push((l1, T::one()));
        cb_terms.push((l2, beta));
        let h = up_on_tape(tape, e, big, phi)?;
        h_hat = Some(match h_hat {
            None => h,
            Some(acc) => tape.add(acc, h)?,
        });
        let h_sg = frozen.stop(tape, h);
        r = tape.sub(r, h_sg)?;
        scales.push(z);
    }
    let cb_loss = tape.weighted_sum(&cb_terms)?;
    Ok(QuantizeOutput { tokens: TokenPyramid { scales }, h_hat: h_hat.expect("non-empty schedule"), residual: r, cb_loss })
}

/// Plain-tensor result of [`quantize_multiscale`].
#[derive(Clone, Debug)]
pub struct Quantized {
    pub tokens: TokenPyramid,
    pub h_hat: Tensor<f32>,
    pub residual: Tensor<f32>,
    /// `h^(l)` for every scale.
    pub per_scale: Vec<Tensor<f32>>,
}

/// Residual quantization with plain tensors. `phi` defaults to the identity.
pub fn quantize_multiscale(
    r0: &Tensor<f32>,
    cb: &Codebook,
    sched: &ScaleSchedule,
    phi: Option<(&Tensor<f32>, &Tensor<f32>)>,
) -> Result<Quantized> {
    if r0.rows() != sched.window() || r0.cols() != cb.dim() {
        return Err(dim_err!("latent {:?} does not fit schedule window {} and codebook width {}", r0.shape(), sched.window(), cb.dim()));
    }
    let mut r = r0.clone();
    let mut h_hat = Tensor::zeros(&[r0.rows(), r0.cols()]);
    let mut scales = Vec::new();
    let mut per_scale = Vec::new();
    for &k in sched.lengths() {
        let down = interp_down(&r, k)?;
        let z = nearest(&down, cb.entries());
        let e = lookup(cb.entries(), &z);
        let h = interp_up(&e, r0.rows(), phi)?;
        h_hat.add_assign(&h);
        r = r.zip_map(&h, |a, b| a - b)?;
        scales.push(z);
        per_scale.push(h);
    }
    Ok(Quantized { tokens: TokenPyramid { scales }, h_hat, residual: r, per_scale })
}

pub(crate) fn lookup<T: Real>(cb: &Tensor<T>, z: &[usize]) -> Tensor<T> {
    let mut out = Tensor::zeros(&[z.len(), cb.cols()]);
    for (i, &j) in z.iter().enumerate() {
        out.row_mut(i).copy_from_slice(cb.row(j));
    }
    out
}


#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn col(v: &[f32]) -> Tensor<f32> {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn interpolation_hand_values() {
        let x = col(&[1.0, 2.0, 3.0, 4.0]);
        let d = interp_down(&x, 2).unwrap();
        assert_eq!(d.data(), &[1.5, 3.5]);
        let u = interp_up(&d, 4, None).unwrap();
        let want = [1.5, 1.5 + 2.0 / 3.0, 1.5 + 4.0 / 3.0, 3.5];
        for (a, b) in u.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert_eq!(interp_down(&x, 4).unwrap(), x);
        assert!(interp_down(&x, 5).is_err());
        assert!(interp_down(&x, 0).is_err());
        assert!(interp_up(&x, 3, None).is_err());
    }

    #[test]
    fn constants_survive_down_then_up() {
        let x = Tensor::full(&[100, 3], 0.7f32);
        for k in [1, 5, 25, 50, 100] {
            let y = interp_up(&interp_down(&x, k).unwrap(), 100, None).unwrap();
            assert!(y.max_abs_diff(&x) < 1e-6);
        }
    }

    #[test]
    fn exact_single_scale_quantization() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cb = Codebook::init(16, 4, &mut rng);
        let z: Vec<usize> = (0..10).map(|i| (i * 7) % 16).collect();
        let r0 = lookup(cb.entries(), &z);
        let q = quantize_multiscale(&r0, &cb, &ScaleSchedule::single(10).unwrap(), None).unwrap();
        assert_eq!(q.tokens.scales[0], z);
        assert!(q.residual.data().iter().all(|&v| v == 0.0));
        // idempotence
        let again = quantize_multiscale(&lookup(cb.entries(), &q.tokens.scales[0]), &cb, &ScaleSchedule::single(10).unwrap(), None).unwrap();
        assert_eq!(again.tokens, q.tokens);
    }

    #[test]
    fn zero_is_a_fixed_point() {
        let mut e = Tensor::<f32>::uniform(&[8, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        e.row_mut(5).fill(0.0);
        let cb = Codebook::new(e).unwrap();
        let q = quantize_multiscale(&Tensor::zeros(&[100, 3]), &cb, &ScaleSchedule::paper_default(), None).unwrap();
        assert!(q.tokens.scales.iter().flatten().all(|&t| t == 5));
        assert_eq!(q.h_hat.max_abs(), 0.0);
        assert_eq!(q.residual.max_abs(), 0.0);
    }

    #[test]
    fn ties_pick_lowest_index() {
        let cb = Tensor::new(vec![3, 1], vec![1.0f32, -1.0, 1.0]).unwrap();
        assert_eq!(nearest(&col(&[0.0, 1.0, -2.0]), &cb), vec![0, 0, 1]);
    }

    #[test]
    fn residual_norms_do_not_grow_at_full_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut e = Tensor::<f32>::randn(&[32, 4], 1.0, &mut rng);
        e.row_mut(0).fill(0.0);
        let cb = Codebook::new(e).unwrap();
        let sched = ScaleSchedule::new(vec![20]).unwrap();
        let mut r = Tensor::<f32>::randn(&[20, 4], 1.0, &mut rng);
        let norm = |t: &Tensor<f32>, i: usize| t.row(i).iter().map(|v| v * v).sum::<f32>();
        for _ in 0..4 {
            let q = quantize_multiscale(&r, &cb, &sched, None).unwrap();
            for i in 0..20 {
                assert!(norm(&q.residual, i) <= norm(&r, i) + 1e-6);
            }
            r = q.residual;
        }
    }

    #[test]
    fn tape_and_plain_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cb = Codebook::init(64, 8, &mut rng);
        let r0 = Tensor::<f32>::randn(&[100, 8], 0.05, &mut rng);
        let sched = ScaleSchedule::paper_default();
        let plain = quantize_multiscale(&r0, &cb, &sched, None).unwrap();
        let store = crate::numerics::ParamStore::<f32>::new();
        let mut tape = Tape::new(&store);
        let (rv, cv) = (tape.constant(r0.clone()), tape.constant(cb.entries().clone()));
        let out = quantize_on_tape(&mut tape, rv, cv, None, &sched, 0.25, &mut Frozen::off()).unwrap();
        assert_eq!(out.tokens, plain.tokens);
        assert!(tape.value(out.h_hat).max_abs_diff(&plain.h_hat) < 1e-6);
        assert!(tape.value(out.residual).max_abs_diff(&plain.residual) < 1e-6);
    }
}
