use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{MotionWindow, EXPR_DIM, MOTION_DIM, POSE_DIM, ROT_CHANNEL};
use crate::error::{dim_err, format_err, Error, Result};
use crate::io_util::{read_f32s, read_u16, read_u32, write_f32s};
use crate::numerics::rotation::rodrigues;
use crate::numerics::{gemm, MatMut, Real, Tape, Tensor, Var};

const MAGIC: &[u8; 4] = b"ARTB";
const VERSION: u16 = 1;

/// Template mesh and blendshape bases.
///
/// Bases are stored flattened per component: `shape_basis` is
/// `n_shape x 3N`, `expr_basis` is `50 x 3N`, `pose_basis` is `6 x 3N`, with
/// each row laid out vertex-major (`x0 y0 z0 x1 ...`).
#[derive(Clone, Debug, PartialEq)]
pub struct FlameBasis {
    template: Tensor<f32>,
    shape_basis: Tensor<f32>,
    expr_basis: Tensor<f32>,
    pose_basis: Tensor<f32>,
    faces: Option<Vec<[u32; 3]>>,
}

impl FlameBasis {
    pub fn new(
        template: Tensor<f32>,
        shape_basis: Tensor<f32>,
        expr_basis: Tensor<f32>,
        pose_basis: Tensor<f32>,
    ) -> Result<Self> {
        let n = template.len() / 3;
        if template.len() != 3 * n || n == 0 {
            return Err(dim_err!("template must hold N x 3 positions"));
        }
        let template = template.reshape(vec![n, 3])?;
        let check = |t: &Tensor<f32>, rows: Option<usize>, what: &str| -> Result<()> {
            if t.cols() != 3 * n || t.len() % (3 * n) != 0 || rows.is_some_and(|r| t.rows() != r) {
                return Err(dim_err!("{what} basis {:?} does not match {} vertices", t.shape(), n));
            }
            Ok(())
        };
        check(&shape_basis, None, "shape")?;
        check(&expr_basis, Some(EXPR_DIM), "expression")?;
        check(&pose_basis, Some(POSE_DIM), "pose")?;
        if shape_basis.rows() == 0 {
            return Err(dim_err!("shape basis needs at least one component"));
        }
        for t in [&template, &shape_basis, &expr_basis, &pose_basis] {
            if !t.all_finite() {
                return Err(Error::Numeric("basis contains non-finite entries".into()));
            }
        }
        Ok(FlameBasis { template, shape_basis, expr_basis, pose_basis, faces: None })
    }

    pub fn with_faces(mut self, faces: Vec<[u32; 3]>) -> Result<Self> {
        let n = self.vertex_count() as u32;
        if faces.iter().flatten().any(|&i| i >= n) {
            return Err(dim_err!("face index out of range for {} vertices", n));
        }
        self.faces = Some(faces);
        Ok(self)
    }

    /// Deterministic desk-scale head: 16 lip vertices (8 upper, 8 lower),
    /// 24 upper-face vertices and 24 lower-face vertices.
    ///
    /// The jaw coefficient pulls the lower lip and chin downward by about a
    /// centimeter per unit; every other basis vector is small random noise.
    pub fn synthetic(seed: u64, n_shape: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pos: Vec<[f32; 3]> = Vec::with_capacity(64);
        for i in 0..8 {
            let x = -0.025 + 0.05 * i as f32 / 7.0;
            pos.push([x, -0.045, 0.09 - 20.0 * x * x]);
        }
        for i in 0..8 {
            let x = -0.025 + 0.05 * i as f32 / 7.0;
            pos.push([x, -0.055, 0.09 - 20.0 * x * x]);
        }
        for r in 0..3 {
            for c in 0..8 {
                let x = -0.07 + 0.14 * c as f32 / 7.0;
                pos.push([x, 0.02 + 0.03 * r as f32, 0.08 - 8.0 * x * x]);
            }
        }
        for r in 0..3 {
            for c in 0..8 {
                let x = -0.07 + 0.14 * c as f32 / 7.0;
                pos.push([x, -0.085 + 0.04 * r as f32, 0.075 - 8.0 * x * x]);
            }
        }
        let n = pos.len();
        let template = Tensor::new(vec![n, 3], pos.iter().flatten().copied().collect()).expect("template");
        let shape_basis = Tensor::randn(&[n_shape.max(1), 3 * n], 2e-3, &mut rng);
        let expr_basis = Tensor::randn(&[EXPR_DIM, 3 * n], 1e-3, &mut rng);
        let mut pose_basis = Tensor::<f32>::randn(&[POSE_DIM, 3 * n], 2e-4, &mut rng);
        let jaw = pose_basis.row_mut(3);
        for (v, p) in pos.iter().enumerate() {
            // lower lip and below
            if p[1] <= -0.05 {
                let weight = ((-0.045 - p[1]) / 0.04).clamp(0.0, 1.0) + 0.5;
                jaw[3 * v + 1] -= 0.01 * weight.min(1.0);
            }
        }
        let mut faces = Vec::new();
        // triangle strips between rows of 8: lips to their patches, then within each patch
        for (a, b) in [(0u32, 16u32), (16, 24), (24, 32), (8, 40), (40, 48), (48, 56)] {
            for c in 0..7 {
                faces.push([a + c, b + c, a + c + 1]);
                faces.push([a + c + 1, b + c, b + c + 1]);
            }
        }
        FlameBasis::new(template, shape_basis, expr_basis, pose_basis)
            .and_then(|b| b.with_faces(faces))
            .expect("synthetic basis is valid")
    }

    pub fn vertex_count(&self) -> usize {
        self.template.rows()
    }

    pub fn shape_count(&self) -> usize {
        self.shape_basis.rows()
    }

    pub fn template(&self) -> &Tensor<f32> {
        &self.template
    }

    pub fn shape_basis(&self) -> &Tensor<f32> {
        &self.shape_basis
    }

    pub fn expr_basis(&self) -> &Tensor<f32> {
        &self.expr_basis
    }

    pub fn pose_basis(&self) -> &Tensor<f32> {
        &self.pose_basis
    }

    pub fn faces(&self) -> Option<&[[u32; 3]]> {
        self.faces.as_deref()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.vertex_count() as f64;
        let mut c = [0.0; 3];
        for v in 0..self.vertex_count() {
            for (a, ca) in c.iter_mut().enumerate() {
                *ca += self.template.at(v, a) as f64 / n;
            }
        }
        c
    }

    /// Identity-specific vertex model for shape coefficients `beta`.
    pub fn vertex_model<T: Real>(&self, beta: &[f32]) -> Result<VertexModel<T>> {
        if beta.len() != self.shape_count() {
            return Err(dim_err!("{} shape coefficients for a basis with {}", beta.len(), self.shape_count()));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Numeric("non-finite shape coefficients".into()));
        }
        let cols = 3 * self.vertex_count();
        let mut base = self.template.clone().reshape(vec![1, cols])?;
        for (i, &b) in beta.iter().enumerate() {
            for (x, &s) in base.data_mut().iter_mut().zip(self.shape_basis.row(i)) {
                *x += b * s;
            }
        }
        let blend = Tensor::concat_rows(&[&self.expr_basis, &self.pose_basis])?;
        Ok(VertexModel { base: base.cast(), blend: blend.cast(), pivot: self.centroid() })
    }

    pub fn reconstruct_vertices(&self, beta: &[f32], window: &MotionWindow) -> Result<Tensor<f32>> {
        self.vertex_model::<f32>(beta)?.vertices(window.frames())
    }
}

/// Blendshape model specialized to one identity: `V = R(rot) (base + M B - c) + c`.
#[derive(Clone, Debug)]
pub struct VertexModel<T> {
    base: Tensor<T>,
    blend: Tensor<T>,
    pivot: [f64; 3],
}

impl<T: Real> VertexModel<T> {
    pub fn vertex_count(&self) -> usize {
        self.base.cols() / 3
    }

    /// Vertices for `frames: K x 56`, returned as `K x 3N`.
    pub fn vertices(&self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        if frames.cols() != MOTION_DIM {
            return Err(dim_err!("motion frames must have {} columns, got {}", MOTION_DIM, frames.cols()));
        }
        let (k, cols) = (frames.rows(), self.base.cols());
        let mut out = Tensor::zeros(&[k, cols]);
        for t in 0..k {
            out.row_mut(t).copy_from_slice(self.base.data());
        }
        gemm(T::one(), frames.as_matrix(), self.blend.as_matrix(), T::one(), MatMut::row_major(out.data_mut(), k, cols));
        for t in 0..k {
            let w = &frames.row(t)[ROT_CHANNEL..ROT_CHANNEL + 3];
            let r = rodrigues([w[0].as_f64(), w[1].as_f64(), w[2].as_f64()]);
            for v in out.row_mut(t).chunks_mut(3) {
                let x = [v[0].as_f64() - self.pivot[0], v[1].as_f64() - self.pivot[1], v[2].as_f64() - self.pivot[2]];
                for a in 0..3 {
                    v[a] = T::lit(r[a][0] * x[0] + r[a][1] * x[1] + r[a][2] * x[2] + self.pivot[a]);
                }
            }
        }
        Ok(out)
    }

    /// Differentiable counterpart of [`VertexModel::vertices`].
    pub fn vertices_on_tape(&self, tape: &mut Tape<'_, T>, frames: Var) -> Result<Var> {
        let blend = tape.constant(self.blend.clone());
        let base = tape.constant(self.base.clone());
        let lin = tape.matmul(frames, blend)?;
        let pts = tape.add_row(lin, base)?;
        let omega = tape.slice_cols(frames, ROT_CHANNEL, ROT_CHANNEL + 3)?;
        tape.rotate_about(pts, omega, self.pivot)
    }
}

pub fn write_basis<W: Write>(w: &mut W, basis: &FlameBasis) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(basis.vertex_count() as u32).to_le_bytes())?;
    w.write_all(&(basis.shape_count() as u32).to_le_bytes())?;
    for t in [&basis.template, &basis.shape_basis, &basis.expr_basis, &basis.pose_basis] {
        write_f32s(w, t.data())?;
    }
    if let Some(faces) = &basis.faces {
        w.write_all(&(faces.len() as u32).to_le_bytes())?;
        for f in faces {
            for i in f {
                w.write_all(&i.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Reads an ARTB basis. An optional trailing face block
/// (`u32 count`, then `count x 3` `u32` indices) is accepted.
pub fn read_basis<R: Read>(r: &mut R) -> Result<FlameBasis> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| format_err!("basis file too short"))?;
    if &magic != MAGIC {
        return Err(format_err!("bad basis magic {:?}", magic));
    }
    let version = read_u16(r)?;
    if version != VERSION {
        return Err(format_err!("unsupported basis version {version}"));
    }
    let n = read_u32(r)? as usize;
    let n_shape = read_u32(r)? as usize;
    let cols = 3 * n;
    let template = Tensor::new(vec![n, 3], read_f32s(r, cols)?)?;
    let shape = Tensor::new(vec![n_shape, cols], read_f32s(r, n_shape * cols)?)?;
    let expr = Tensor::new(vec![EXPR_DIM, cols], read_f32s(r, EXPR_DIM * cols)?)?;
    let pose = Tensor::new(vec![POSE_DIM, cols], read_f32s(r, POSE_DIM * cols)?)?;
    let basis = FlameBasis::new(template, shape, expr, pose).map_err(|e| format_err!("invalid basis: {e}"))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if rest.is_empty() {
        return Ok(basis);
    }
    let mut cur = &rest[..];
    let count = read_u32(&mut cur)? as usize;
    if cur.len() != count * 12 {
        return Err(format_err!("face block holds {} bytes, expected {}", cur.len(), count * 12));
    }
    let faces = cur
        .chunks_exact(12)
        .map(|c| {
            let idx = |o: usize| u32::from_le_bytes(c[o..o + 4].try_into().expect("4 bytes"));
            [idx(0), idx(4), idx(8)]
        })
        .collect();
    basis.with_faces(faces).map_err(|e| format_err!("invalid faces: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{MotionWindow, JAW_CHANNEL};

    fn window(rows: Vec<[f32; MOTION_DIM]>) -> MotionWindow {
        let k = rows.len();
        MotionWindow::new(Tensor::new(vec![k, MOTION_DIM], rows.concat()).unwrap()).unwrap()
    }

    #[test]
    fn zero_parameters_give_template() {
        let b = FlameBasis::synthetic(1, 4);
        let v = b.reconstruct_vertices(&[0.0; 4], &MotionWindow::neutral(3)).unwrap();
        for t in 0..3 {
            assert_eq!(v.row(t), b.template().data());
        }
    }

    #[test]
    fn single_shape_component() {
        let b = FlameBasis::synthetic(2, 4);
        let v = b.reconstruct_vertices(&[1.0, 0.0, 0.0, 0.0], &MotionWindow::neutral(1)).unwrap();
        for (j, &x) in v.row(0).iter().enumerate() {
            assert_eq!(x, b.template().data()[j] + b.shape_basis().row(0)[j]);
        }
    }

    #[test]
    fn quarter_turn_about_centroid() {
        // two vertices: centroid is their midpoint
        let template = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0]).unwrap();
        let z = |r| Tensor::zeros(&[r, 6]);
        let b = FlameBasis::new(template, z(1), z(EXPR_DIM), z(POSE_DIM)).unwrap();
        let mut f = [0.0f32; MOTION_DIM];
        f[ROT_CHANNEL + 2] = std::f32::consts::FRAC_PI_2;
        let v = b.reconstruct_vertices(&[0.0], &window(vec![f])).unwrap();
        // (1,0,0) about origin by +90 deg around z -> (0,1,0)
        let expect = [0.0, 1.0, 0.0, 0.0, -1.0, 0.0];
        for (a, e) in v.row(0).iter().zip(expect) {
            assert!((a - e).abs() < 1e-6);
        }

        let template = Tensor::new(vec![2, 3], vec![2.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let b = FlameBasis::new(template, z(1), z(EXPR_DIM), z(POSE_DIM)).unwrap();
        let v = b.reconstruct_vertices(&[0.0], &window(vec![f])).unwrap();
        // centroid (1,1,0); (2,1,0) -> (1,2,0)
        assert!((v.row(0)[0] - 1.0).abs() < 1e-6 && (v.row(0)[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn affine_in_blendshape_coefficients() {
        let b = FlameBasis::synthetic(3, 4);
        let mut a = [0.0f32; MOTION_DIM];
        let mut d = [0.0f32; MOTION_DIM];
        a[3] = 0.4;
        a[JAW_CHANNEL] = 0.2;
        d[7] = -0.3;
        d[JAW_CHANNEL] = 0.5;
        let mut ad = a;
        for i in 0..MOTION_DIM {
            ad[i] += d[i];
        }
        let va = b.reconstruct_vertices(&[0.0; 4], &window(vec![a])).unwrap();
        let vad = b.reconstruct_vertices(&[0.0; 4], &window(vec![ad])).unwrap();
        let vd = b.reconstruct_vertices(&[0.0; 4], &window(vec![d])).unwrap();
        let v0 = b.reconstruct_vertices(&[0.0; 4], &MotionWindow::neutral(1)).unwrap();
        for j in 0..vd.len() {
            let lhs = vad.data()[j] - va.data()[j];
            let rhs = vd.data()[j] - v0.data()[j];
            assert!((lhs - rhs).abs() < 1e-6);
        }
    }

    #[test]
    fn dimension_errors() {
        let b = FlameBasis::synthetic(1, 4);
        assert!(matches!(b.reconstruct_vertices(&[0.0; 3], &MotionWindow::neutral(2)), Err(Error::Dimension(_))));
        let t = Tensor::zeros(&[4, 3]);
        assert!(FlameBasis::new(t, Tensor::zeros(&[1, 12]), Tensor::zeros(&[EXPR_DIM, 9]), Tensor::zeros(&[POSE_DIM, 12])).is_err());
    }

    #[test]
    fn tape_vertices_match_direct() {
        let b = FlameBasis::synthetic(4, 4);
        let model = b.vertex_model::<f64>(&[0.1, 0.0, -0.2, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames = Tensor::<f64>::randn(&[5, MOTION_DIM], 0.3, &mut rng);
        let direct = model.vertices(&frames).unwrap();
        let store = crate::numerics::ParamStore::new();
        let mut tape = Tape::new(&store);
        let f = tape.constant(frames);
        let v = model.vertices_on_tape(&mut tape, f).unwrap();
        assert!(tape.value(v).max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn basis_file_roundtrip_with_and_without_faces() {
        let b = FlameBasis::synthetic(5, 3);
        let mut buf = Vec::new();
        write_basis(&mut buf, &b).unwrap();
        assert_eq!(&buf[..4], b"ARTB");
        assert_eq!(read_basis(&mut &buf[..]).unwrap(), b);
        let bf = b.with_faces(vec![[0, 1, 2], [2, 3, 4]]).unwrap();
        let mut buf = Vec::new();
        write_basis(&mut buf, &bf).unwrap();
        assert_eq!(read_basis(&mut &buf[..]).unwrap().faces().unwrap().len(), 2);
        assert!(matches!(read_basis(&mut &buf[..buf.len() - 30]), Err(Error::Format(_))));
    }
}
