//! Reverse-mode differentiation over a per-step recording tape.
//!
//! A [`Tape`] borrows one [`ParamStore`] immutably for the duration of a
//! forward pass. Every operation appends a node holding its value and the
//! data its backward rule needs. [`Tape::backward`] walks the nodes in reverse
//! and returns [`Gradients`], which the caller folds into the store.
//!
//! All values are 2-D (`rows x cols`); scalars are `1 x 1`.

use super::params::{ParamId, ParamStore};
use super::real::{gemm, MatMut, MatRef, Real};
use super::rotation::{rodrigues, rodrigues_grad};
use super::tensor::Tensor;
use crate::error::{contract_err, dim_err, Error, Result};

const NORM_EPS: f64 = 1e-5;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Boolean attention mask, `true` = allowed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(dim_err!("mask {}x{} needs {} entries", rows, cols, rows * cols));
        }
        for i in 0..rows {
            if !allowed[i * cols..(i + 1) * cols].iter().any(|&a| a) {
                return Err(contract_err!("attention mask row {i} allows no position"));
            }
        }
        Ok(AttnMask { rows, cols, allowed })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        AttnMask { rows, cols, allowed: vec![true; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Self::new(rows, cols, allowed)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    /// Leading `rows x cols` sub-mask.
    pub fn truncate(&self, rows: usize, cols: usize) -> Result<Self> {
        Self::from_fn(rows, cols, |i, j| self.allowed(i, j))
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var },
    MatMulNT { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    AddRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    Gelu { a: Var },
    Normalize { a: Var, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Gather { table: Var, idx: Vec<usize> },
    Concat { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    MeanRows { a: Var },
    Rotate { points: Var, omega: Var, pivot: [f64; 3] },
    MeanAbs { a: Var },
    MeanSq { a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    WeightedSum { terms: Vec<(Var, T)> },
}

enum Slot<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

struct Node<T> {
    slot: Slot<T>,
    op: Op<T>,
}

/// Recording tape for one forward/backward pass.
pub struct Tape<'a, T: Real> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Vec<T>)>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to any recorded node.
    pub fn wrt(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("stored shape"))
    }

    /// Adds every parameter gradient into `store.grad`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in &self.params {
            let p = store.get_mut(*id);
            for (dst, &src) in p.grad.data_mut().iter_mut().zip(g) {
                *dst = *dst + src;
            }
        }
    }
}

fn gelu<T: Real>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let x3 = x * x * x;
    let u = c * (x + k * x3);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let du = c * (T::one() + T::lit(3.0) * k * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
    (y, dy)
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Tape { store, nodes: Vec::new() }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { slot: Slot::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].slot {
            Slot::Owned(t) => t,
            Slot::Param(id) => self.store.value(*id),
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let (r, c) = (t.rows(), t.cols());
        let t = t.reshape(vec![r, c]).expect("same size");
        self.push(t, Op::Leaf)
    }

    /// Value copy that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { slot: Slot::Param(id), op: Op::Param(id) });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(dim_err!("matmul {}x{} @ {}x{}", m, k, k2, n));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(T::one(), self.value(a).as_matrix(), self.value(b).as_matrix(), T::zero(), MatMut::row_major(out.data_mut(), m, n));
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(dim_err!("matmul_nt {}x{} @ ({}x{})^T", m, k, n, k2));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(T::one(), self.value(a).as_matrix(), self.value(b).as_matrix().t(), T::zero(), MatMut::row_major(out.data_mut(), m, n));
        Ok(self.push(out, Op::MatMulNT { a, b }))
    }

    /// `x @ w + b` with `w: in x out`, `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.dims(x);
        let (k2, n) = self.dims(w);
        if k != k2 {
            return Err(dim_err!("linear input {}x{} vs weight {}x{}", m, k, k2, n));
        }
        let mut out = Tensor::zeros(&[m, n]);
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.len() != n {
                return Err(dim_err!("bias length {} vs {}", bias.len(), n));
            }
            for i in 0..m {
                out.row_mut(i).copy_from_slice(bias.data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(T::one(), self.value(x).as_matrix(), self.value(w).as_matrix(), beta, MatMut::row_major(out.data_mut(), m, n));
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale { a, s })
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, |x, y| x + y)?;
        Ok(self.push(out, Op::AddRow { a, row }))
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, |x, y| x * y)?;
        Ok(self.push(out, Op::MulRow { a, row }))
    }

    fn row_broadcast(&self, a: Var, row: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (m, n) = self.dims(a);
        let r = self.value(row);
        if r.len() != n {
            return Err(dim_err!("row broadcast of length {} onto {}x{}", r.len(), m, n));
        }
        let mut out = self.value(a).clone();
        for i in 0..m {
            for (x, &y) in out.row_mut(i).iter_mut().zip(r.data()) {
                *x = f(*x, y);
            }
        }
        Ok(out)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu(x).0);
        self.push(out, Op::Gelu { a })
    }

    /// Per-row zero-mean, unit-variance normalization (no affine).
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (m, n) = (src.rows(), src.cols());
        let nf = T::lit(n as f64);
        let eps = T::lit(NORM_EPS);
        let mut out = Tensor::zeros(&[m, n]);
        let mut rstd = Vec::with_capacity(m);
        for i in 0..m {
            let row = src.row(i);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            for (o, &x) in out.row_mut(i).iter_mut().zip(row) {
                *o = (x - mean) * r;
            }
            rstd.push(r);
        }
        self.push(out, Op::Normalize { a, rstd })
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: n x (heads*dh)`, `k, v: m x (heads*dh)`. Masked positions receive
    /// exactly zero weight; the softmax runs over allowed positions only.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &AttnMask, heads: usize) -> Result<Var> {
        let (n, dq) = self.dims(q);
        let (m, dk) = self.dims(k);
        let (mv, dv) = self.dims(v);
        if dq != dk || dk != dv || m != mv {
            return Err(dim_err!("attention q {}x{}, k {}x{}, v {}x{}", n, dq, m, dk, mv, dv));
        }
        if dq == 0 || heads == 0 || dq % heads != 0 {
            return Err(dim_err!("model width {} not divisible into {} heads", dq, heads));
        }
        if mask.rows() != n || mask.cols() != m {
            return Err(dim_err!("mask {}x{} for scores {}x{}", mask.rows(), mask.cols(), n, m));
        }
        let dh = dq / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * n * m];
        let mut out = Tensor::zeros(&[n, dq]);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for h in 0..heads {
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            gemm(
                scale,
                MatRef::col_block(qd, n, dq, h * dh, dh),
                MatRef::col_block(kd, m, dq, h * dh, dh).t(),
                T::zero(),
                MatMut::row_major(p, n, m),
            );
            for i in 0..n {
                let row = &mut p[i * m..(i + 1) * m];
                let mut mx = T::neg_infinity();
                for (j, &s) in row.iter().enumerate() {
                    if mask.allowed(i, j) && s > mx {
                        mx = s;
                    }
                }
                let mut z = T::zero();
                for (j, s) in row.iter_mut().enumerate() {
                    if mask.allowed(i, j) {
                        *s = (*s - mx).exp();
                        z = z + *s;
                    } else {
                        *s = T::zero();
                    }
                }
                for s in row.iter_mut() {
                    *s = *s / z;
                }
            }
            gemm(
                T::one(),
                MatRef::row_major(p, n, m),
                MatRef::col_block(vd, m, dq, h * dh, dh),
                T::zero(),
                MatMut::col_block(out.data_mut(), n, dq, h * dh, dh),
            );
        }
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }))
    }

    /// Rows `idx[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (r, c) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(&[idx.len(), c]);
        for (i, &j) in idx.iter().enumerate() {
            if j >= r {
                return Err(contract_err!("index {j} out of range for table with {r} rows"));
            }
            out.row_mut(i).copy_from_slice(t.row(j));
        }
        Ok(self.push(out, Op::Gather { table, idx: idx.to_vec() }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec() }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, _) = self.dims(a);
        if start > end || end > m {
            return Err(dim_err!("row slice {}..{} of {} rows", start, end, m));
        }
        let out = self.value(a).slice_rows(start, end);
        Ok(self.push(out, Op::SliceRows { a, start }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start > end || end > n {
            return Err(dim_err!("column slice {}..{} of {} columns", start, end, n));
        }
        let src = self.value(a);
        let mut out = Tensor::zeros(&[m, end - start]);
        for i in 0..m {
            out.row_mut(i).copy_from_slice(&src.row(i)[start..end]);
        }
        Ok(self.push(out, Op::SliceCols { a, start }))
    }

    /// Column means, `1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (m, n) = (src.rows(), src.cols());
        let mut out = Tensor::zeros(&[1, n]);
        let inv = T::one() / T::lit(m as f64);
        for i in 0..m {
            for (o, &x) in out.data_mut().iter_mut().zip(src.row(i)) {
                *o = *o + x * inv;
            }
        }
        self.push(out, Op::MeanRows { a })
    }

    /// Rotates each frame's points about `pivot` by that frame's axis-angle.
    ///
    /// `points: frames x (3*verts)`, `omega: frames x 3`.
    pub fn rotate_about(&mut self, points: Var, omega: Var, pivot: [f64; 3]) -> Result<Var> {
        let (f, c) = self.dims(points);
        let (f2, three) = self.dims(omega);
        if f != f2 || three != 3 || c % 3 != 0 {
            return Err(dim_err!("rotate points {}x{} with omega {}x{}", f, c, f2, three));
        }
        let mut out = Tensor::zeros(&[f, c]);
        let (p, w) = (self.value(points), self.value(omega));
        for t in 0..f {
            let wr = w.row(t);
            let r = rodrigues([wr[0].as_f64(), wr[1].as_f64(), wr[2].as_f64()]);
            let src = p.row(t);
            let dst = out.row_mut(t);
            for vtx in 0..c / 3 {
                let x = [
                    src[3 * vtx].as_f64() - pivot[0],
                    src[3 * vtx + 1].as_f64() - pivot[1],
                    src[3 * vtx + 2].as_f64() - pivot[2],
                ];
                for a in 0..3 {
                    let y = r[a][0] * x[0] + r[a][1] * x[1] + r[a][2] * x[2] + pivot[a];
                    dst[3 * vtx + a] = T::lit(y);
                }
            }
        }
        Ok(self.push(out, Op::Rotate { points, omega, pivot }))
    }

    pub fn mean_abs(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = t.data().iter().map(|x| x.abs()).sum::<T>() / T::lit(t.len().max(1) as f64);
        self.push(Tensor::full(&[1, 1], v), Op::MeanAbs { a })
    }

    pub fn mean_sq(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = t.data().iter().map(|&x| x * x).sum::<T>() / T::lit(t.len().max(1) as f64);
        self.push(Tensor::full(&[1, 1], v), Op::MeanSq { a })
    }

    /// Mean softmax cross-entropy of `logits: n x V` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, vocab) = (t.rows(), t.cols());
        if targets.len() != n {
            return Err(dim_err!("{} targets for {} logit rows", targets.len(), n));
        }
        let mut probs = vec![T::zero(); n * vocab];
        let mut total = T::zero();
        for (i, &tgt) in targets.iter().enumerate() {
            if tgt >= vocab {
                return Err(contract_err!("target {tgt} out of range for vocabulary {vocab}"));
            }
            let row = t.row(i);
            let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let p = &mut probs[i * vocab..(i + 1) * vocab];
            let mut z = T::zero();
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - mx).exp();
                z = z + *pj;
            }
            for pj in p.iter_mut() {
                *pj = *pj / z;
            }
            total = total + (mx + z.ln() - row[tgt]);
        }
        let loss = total / T::lit(n.max(1) as f64);
        Ok(self.push(Tensor::full(&[1, 1], loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut v = T::zero();
        for &(x, w) in terms {
            let t = self.value(x);
            if t.len() != 1 {
                return Err(dim_err!("weighted_sum expects scalars, got {:?}", t.shape()));
            }
            v = v + w * t.data()[0];
        }
        Ok(self.push(Tensor::full(&[1, 1], v), Op::WeightedSum { terms: terms.to_vec() }))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(dim_err!("backward needs a scalar loss, got {:?}", lv.shape()));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", lv.data()[0])));
        }
        let count = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..count).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut params = Vec::new();

        for idx in (0..count).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => params.push((*id, g.clone())),
                Op::MatMul { a, b } => {
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).1;
                    let gm = MatRef::row_major(&g, m, n);
                    acc_gemm(&mut grads, *a, m * k, |dst| {
                        gemm(T::one(), gm, self.value(*b).as_matrix().t(), T::one(), MatMut::row_major(dst, m, k))
                    });
                    acc_gemm(&mut grads, *b, k * n, |dst| {
                        gemm(T::one(), self.value(*a).as_matrix().t(), gm, T::one(), MatMut::row_major(dst, k, n))
                    });
                }
                Op::MatMulNT { a, b } => {
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).0;
                    let gm = MatRef::row_major(&g, m, n);
                    acc_gemm(&mut grads, *a, m * k, |dst| {
                        gemm(T::one(), gm, self.value(*b).as_matrix(), T::one(), MatMut::row_major(dst, m, k))
                    });
                    acc_gemm(&mut grads, *b, n * k, |dst| {
                        gemm(T::one(), gm.t(), self.value(*a).as_matrix(), T::one(), MatMut::row_major(dst, n, k))
                    });
                }
                Op::Linear { x, w, b } => {
                    let (m, k) = self.dims(*x);
                    let n = self.dims(*w).1;
                    let gm = MatRef::row_major(&g, m, n);
                    acc_gemm(&mut grads, *x, m * k, |dst| {
                        gemm(T::one(), gm, self.value(*w).as_matrix().t(), T::one(), MatMut::row_major(dst, m, k))
                    });
                    acc_gemm(&mut grads, *w, k * n, |dst| {
                        gemm(T::one(), self.value(*x).as_matrix().t(), gm, T::one(), MatMut::row_major(dst, k, n))
                    });
                    if let Some(b) = b {
                        let dst = slot(&mut grads, *b, n);
                        for i in 0..m {
                            for (d, &gi) in dst.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *d = *d + gi;
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    add_into(slot(&mut grads, *a, g.len()), &g);
                    add_into(slot(&mut grads, *b, g.len()), &g);
                }
                Op::Sub { a, b } => {
                    add_into(slot(&mut grads, *a, g.len()), &g);
                    let dst = slot(&mut grads, *b, g.len());
                    for (d, &gi) in dst.iter_mut().zip(&g) {
                        *d = *d - gi;
                    }
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let dst = slot(&mut grads, *a, g.len());
                    for ((d, &gi), &y) in dst.iter_mut().zip(&g).zip(bv) {
                        *d = *d + gi * y;
                    }
                    let dst = slot(&mut grads, *b, g.len());
                    for ((d, &gi), &x) in dst.iter_mut().zip(&g).zip(av) {
                        *d = *d + gi * x;
                    }
                }
                Op::Scale { a, s } => {
                    let dst = slot(&mut grads, *a, g.len());
                    for (d, &gi) in dst.iter_mut().zip(&g) {
                        *d = *d + gi * *s;
                    }
                }
                Op::AddRow { a, row } => {
                    let n = self.dims(*a).1;
                    add_into(slot(&mut grads, *a, g.len()), &g);
                    let dst = slot(&mut grads, *row, n);
                    for gi in g.chunks(n) {
                        add_into(dst, gi);
                    }
                }
                Op::MulRow { a, row } => {
                    let n = self.dims(*a).1;
                    let rv = self.value(*row).data();
                    let av = self.value(*a).data();
                    let dst = slot(&mut grads, *a, g.len());
                    for (i, (d, &gi)) in dst.iter_mut().zip(&g).enumerate() {
                        *d = *d + gi * rv[i % n];
                    }
                    let dst = slot(&mut grads, *row, n);
                    for (i, (&gi, &x)) in g.iter().zip(av).enumerate() {
                        dst[i % n] = dst[i % n] + gi * x;
                    }
                }
                Op::Gelu { a } => {
                    let av = self.value(*a).data();
                    let dst = slot(&mut grads, *a, g.len());
                    for ((d, &gi), &x) in dst.iter_mut().zip(&g).zip(av) {
                        *d = *d + gi * gelu(x).1;
                    }
                }
                Op::Normalize { a, rstd } => {
                    let y = match &node.slot {
                        Slot::Owned(t) => t,
                        Slot::Param(_) => unreachable!(),
                    };
                    let n = y.cols();
                    let nf = T::lit(n as f64);
                    let dst = slot(&mut grads, *a, g.len());
                    for (i, &r) in rstd.iter().enumerate() {
                        let gy = &g[i * n..(i + 1) * n];
                        let yr = y.row(i);
                        let mean_g = gy.iter().copied().sum::<T>() / nf;
                        let mean_gy = gy.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        for j in 0..n {
                            let d = &mut dst[i * n + j];
                            *d = *d + r * (gy[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    self.attention_backward(&mut grads, &g, *q, *k, *v, *heads, probs);
                }
                Op::Gather { table, idx } => {
                    let (r, c) = self.dims(*table);
                    let dst = slot(&mut grads, *table, r * c);
                    for (i, &j) in idx.iter().enumerate() {
                        add_into(&mut dst[j * c..(j + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                }
                Op::Concat { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        add_into(slot(&mut grads, p, len), &g[off..off + len]);
                        off += len;
                    }
                }
                Op::SliceRows { a, start } => {
                    let (m, n) = self.dims(*a);
                    let dst = slot(&mut grads, *a, m * n);
                    add_into(&mut dst[start * n..start * n + g.len()], &g);
                }
                Op::SliceCols { a, start } => {
                    let (m, n) = self.dims(*a);
                    let w = g.len() / m.max(1);
                    let dst = slot(&mut grads, *a, m * n);
                    for i in 0..m {
                        add_into(&mut dst[i * n + start..i * n + start + w], &g[i * w..(i + 1) * w]);
                    }
                }
                Op::MeanRows { a } => {
                    let (m, n) = self.dims(*a);
                    let inv = T::one() / T::lit(m as f64);
                    let dst = slot(&mut grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            dst[i * n + j] = dst[i * n + j] + g[j] * inv;
                        }
                    }
                }
                Op::Rotate { points, omega, pivot } => {
                    self.rotate_backward(&mut grads, &g, *points, *omega, *pivot);
                }
                Op::MeanAbs { a } => {
                    let av = self.value(*a).data();
                    let s = g[0] / T::lit(av.len().max(1) as f64);
                    let dst = slot(&mut grads, *a, av.len());
                    for (d, &x) in dst.iter_mut().zip(av) {
                        let sign = if x > T::zero() {
                            T::one()
                        } else if x < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *d = *d + s * sign;
                    }
                }
                Op::MeanSq { a } => {
                    let av = self.value(*a).data();
                    let s = T::lit(2.0) * g[0] / T::lit(av.len().max(1) as f64);
                    let dst = slot(&mut grads, *a, av.len());
                    for (d, &x) in dst.iter_mut().zip(av) {
                        *d = *d + s * x;
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let vocab = self.dims(*logits).1;
                    let n = targets.len();
                    let s = g[0] / T::lit(n.max(1) as f64);
                    let dst = slot(&mut grads, *logits, n * vocab);
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..vocab {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            let d = &mut dst[i * vocab + j];
                            *d = *d + s * (probs[i * vocab + j] - onehot);
                        }
                    }
                }
                Op::WeightedSum { terms } => {
                    for &(x, w) in terms {
                        let dst = slot(&mut grads, x, 1);
                        dst[0] = dst[0] + w * g[0];
                    }
                }
            }
            grads[idx] = Some(g);
        }

        let shapes = self.nodes[..count].iter().map(|n| match &n.slot {
            Slot::Owned(t) => t.shape().to_vec(),
            Slot::Param(id) => self.store.value(*id).shape().to_vec(),
        });
        Ok(Gradients { nodes: grads, params, shapes: shapes.collect() })
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        grads: &mut [Option<Vec<T>>],
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
    ) {
        let (n, d) = self.dims(q);
        let m = self.dims(k).0;
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![T::zero(); n * d];
        let mut gk = vec![T::zero(); m * d];
        let mut gv = vec![T::zero(); m * d];
        let mut dp = vec![T::zero(); n * m];
        for h in 0..heads {
            let p = &probs[h * n * m..(h + 1) * n * m];
            let go = MatRef::col_block(g, n, d, h * dh, dh);
            // dV = P^T dO
            gemm(T::one(), MatRef::row_major(p, n, m).t(), go, T::zero(), MatMut::col_block(&mut gv, m, d, h * dh, dh));
            // dP = dO V^T
            gemm(T::one(), go, MatRef::col_block(vd, m, d, h * dh, dh).t(), T::zero(), MatMut::row_major(&mut dp, n, m));
            for i in 0..n {
                let pr = &p[i * m..(i + 1) * m];
                let dr = &mut dp[i * m..(i + 1) * m];
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (x, &pj) in dr.iter_mut().zip(pr) {
                    *x = pj * (*x - dot);
                }
            }
            gemm(scale, MatRef::row_major(&dp, n, m), MatRef::col_block(kd, m, d, h * dh, dh), T::zero(), MatMut::col_block(&mut gq, n, d, h * dh, dh));
            gemm(scale, MatRef::row_major(&dp, n, m).t(), MatRef::col_block(qd, n, d, h * dh, dh), T::zero(), MatMut::col_block(&mut gk, m, d, h * dh, dh));
        }
        add_into(slot(grads, q, n * d), &gq);
        add_into(slot(grads, k, m * d), &gk);
        add_into(slot(grads, v, m * d), &gv);
    }

    fn rotate_backward(&self, grads: &mut [Option<Vec<T>>], g: &[T], points: Var, omega: Var, pivot: [f64; 3]) {
        let (f, c) = self.dims(points);
        let (p, w) = (self.value(points), self.value(omega));
        let mut gp = vec![T::zero(); f * c];
        let mut gw = vec![T::zero(); f * 3];
        for t in 0..f {
            let wr = w.row(t);
            let wv = [wr[0].as_f64(), wr[1].as_f64(), wr[2].as_f64()];
            let r = rodrigues(wv);
            let dr = rodrigues_grad(wv);
            // outer = sum_v g_v (x_v - pivot)^T
            let mut outer = [[0.0f64; 3]; 3];
            let src = p.row(t);
            for vtx in 0..c / 3 {
                let base = t * c + 3 * vtx;
                let gv = [g[base].as_f64(), g[base + 1].as_f64(), g[base + 2].as_f64()];
                let x = [
                    src[3 * vtx].as_f64() - pivot[0],
                    src[3 * vtx + 1].as_f64() - pivot[1],
                    src[3 * vtx + 2].as_f64() - pivot[2],
                ];
                for a in 0..3 {
                    // R^T g
                    gp[base + a] = T::lit(r[0][a] * gv[0] + r[1][a] * gv[1] + r[2][a] * gv[2]);
                    for b in 0..3 {
                        outer[a][b] += gv[a] * x[b];
                    }
                }
            }
            for i in 0..3 {
                let mut s = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        s += dr[i][a][b] * outer[a][b];
                    }
                }
                gw[t * 3 + i] = T::lit(s);
            }
        }
        add_into(slot(grads, points, f * c), &gp);
        add_into(slot(grads, omega, f * 3), &gw);
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn acc_gemm<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize, f: impl FnOnce(&mut [T])) {
    f(slot(grads, v, len));
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
