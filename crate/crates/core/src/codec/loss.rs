use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::numerics::{ParamStore, Real, Tape, Tensor, Var};

/// Weights of the stage-1 objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_lips: f64,
    pub lambda_vel: f64,
    pub lambda_smooth: f64,
    pub beta_commit: f64,
    /// Penalise the second difference of `V̂ - V` rather than of `V̂` alone.
    #[serde(default = "yes")]
    pub smooth_vs_target: bool,
}

fn yes() -> bool {
    true
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_lips: 10.0, lambda_vel: 1.0, lambda_smooth: 1.0, beta_commit: 0.25, smooth_vs_target: true }
    }
}

/// Scalar loss terms as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub recon: Var,
    pub vel: Var,
    pub smooth: Var,
    pub cb: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub vel: f64,
    pub smooth: f64,
    pub cb: f64,
    pub total: f64,
}

impl LossVars {
    pub fn values<T: Real>(&self, tape: &Tape<'_, T>) -> LossBreakdown {
        LossBreakdown {
            recon: tape.scalar(self.recon).as_f64(),
            vel: tape.scalar(self.vel).as_f64(),
            smooth: tape.scalar(self.smooth).as_f64(),
            cb: tape.scalar(self.cb).as_f64(),
            total: tape.scalar(self.total).as_f64(),
        }
    }
}

/// `(n - order) x n` finite-difference operator.
fn diff_matrix<T: Real>(n: usize, order: usize) -> Tensor<T> {
    let coef: &[f64] = if order == 1 { &[-1.0, 1.0] } else { &[1.0, -2.0, 1.0] };
    let mut m = Tensor::zeros(&[n - order, n]);
    for i in 0..n - order {
        for (o, &c) in coef.iter().enumerate() {
            m.row_mut(i)[i + o] = T::lit(c);
        }
    }
    m
}

/// `3N x 3|idx|` column selector for vertex subsets.
fn vertex_selector<T: Real>(n_vertices: usize, idx: &[usize]) -> Result<Tensor<T>> {
    let mut m = Tensor::zeros(&[3 * n_vertices, 3 * idx.len()]);
    for (j, &v) in idx.iter().enumerate() {
        if v >= n_vertices {
            return Err(contract_err!("lip vertex {v} outside mesh of {n_vertices}"));
        }
        for a in 0..3 {
            m.row_mut(3 * v + a)[3 * j + a] = T::one();
        }
    }
    Ok(m)
}

/// Stage-1 objective on the tape. `m_hat, m: K x 56`; `v_hat, v: K x 3N`.
///
/// Norms are mean-reduced so the terms do not scale with window length or
/// mesh size.
pub fn loss_on_tape<T: Real>(
    tape: &mut Tape<'_, T>,
    m_hat: Var,
    m: Var,
    v_hat: Var,
    v: Var,
    lips: &[usize],
    cb: Option<Var>,
    w: &LossWeights,
) -> Result<LossVars> {
    let (k, cols) = (tape.value(v).rows(), tape.value(v).cols());
    if tape.value(v_hat).shape() != tape.value(v).shape() || tape.value(m_hat).shape() != tape.value(m).shape() {
        return Err(dim_err!("prediction and target shapes differ"));
    }
    if cols % 3 != 0 {
        return Err(dim_err!("vertex rows must hold xyz triples, got {cols} columns"));
    }
    if w.lambda_smooth > 0.0 && k < 3 {
        return Err(contract_err!("smoothness term needs at least 3 frames, got {k}"));
    }
    let dm = tape.sub(m_hat, m)?;
    let l1 = tape.mean_abs(dm);
    let dv = tape.sub(v_hat, v)?;
    let all = tape.mean_sq(dv);
    let sel = tape.constant(vertex_selector(cols / 3, lips)?);
    let dl = tape.matmul(dv, sel)?;
    let lip = tape.mean_sq(dl);
    let recon = tape.weighted_sum(&[(l1, T::one()), (lip, T::lit(w.w_lips)), (all, T::one())])?;

    let zero = || Tensor::zeros(&[1, 1]);
    let vel = if k >= 2 {
        let d1 = tape.constant(diff_matrix(k, 1));
        let x = tape.matmul(d1, dv)?;
        tape.mean_sq(x)
    } else {
        tape.constant(zero())
    };
    let smooth = if k >= 3 {
        let d2 = tape.constant(diff_matrix(k, 2));
        let x = tape.matmul(d2, if w.smooth_vs_target { dv } else { v_hat })?;
        tape.mean_sq(x)
    } else {
        tape.constant(zero())
    };
    let cb = match cb {
        Some(c) => c,
        None => tape.constant(zero()),
    };
    let total = tape.weighted_sum(&[(recon, T::one()), (vel, T::lit(w.lambda_vel)), (smooth, T::lit(w.lambda_smooth)), (cb, T::one())])?;
    Ok(LossVars { recon, vel, smooth, cb, total })
}

/// Evaluates the stage-1 objective on plain tensors; `cb` is the already
/// summed quantizer term.
pub fn codec_loss<T: Real>(
    m_hat: &Tensor<T>,
    m: &Tensor<T>,
    v_hat: &Tensor<T>,
    v: &Tensor<T>,
    lips: &[usize],
    cb: T,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let vars = [m_hat, m, v_hat, v].map(|t| tape.constant(t.clone()));
    let cb = tape.constant(Tensor::full(&[1, 1], cb));
    let out = loss_on_tape(&mut tape, vars[0], vars[1], vars[2], vars[3], lips, Some(cb), w)?;
    Ok(out.values(&tape))
}
