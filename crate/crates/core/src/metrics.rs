//! Lip vertex error, upper-face dynamics deviation and mouth-opening
//! difference over `K x 3N` vertex sequences.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::motion::{mouth_opening, VertexMask};
use crate::numerics::{Real, Tensor};

fn check_pair<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(dim_err!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()));
    }
    if pred.cols() % 3 != 0 {
        return Err(dim_err!("vertex rows need xyz triples, got {} columns", pred.cols()));
    }
    Ok(())
}

fn check_subset(idx: &[usize], n: usize, what: &str) -> Result<()> {
    if idx.is_empty() {
        return Err(contract_err!("{what} vertex set is empty"));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
        return Err(dim_err!("{what} vertex {bad} outside mesh of {n}"));
    }
    Ok(())
}

fn point<T: Real>(row: &[T], v: usize) -> [f64; 3] {
    [row[3 * v].as_f64(), row[3 * v + 1].as_f64(), row[3 * v + 2].as_f64()]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Mean over frames of the largest lip-vertex L2 error.
pub fn lve<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, lips: &[usize]) -> Result<f64> {
    check_pair(pred, gt)?;
    check_subset(lips, pred.cols() / 3, "lip")?;
    if pred.rows() == 0 {
        return Err(contract_err!("empty sequence"));
    }
    let total: f64 = (0..pred.rows())
        .map(|t| {
            let (p, g) = (pred.row(t), gt.row(t));
            lips.iter().map(|&v| dist(point(p, v), point(g, v))).fold(0.0, f64::max)
        })
        .sum();
    Ok(total / pred.rows() as f64)
}

/// How per-vertex motion magnitude is measured for [`fdd`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FddConvention {
    /// Standard deviation over time of `|V_t - mean_t V|`.
    #[default]
    NormOfDeviation,
    /// Standard deviation over time of `|V_t|`; not translation invariant.
    DeviationOfNorm,
}

fn dynamics<T: Real>(seq: &Tensor<T>, v: usize, conv: FddConvention) -> f64 {
    let k = seq.rows() as f64;
    let mut mean = [0.0; 3];
    for t in 0..seq.rows() {
        let p = point(seq.row(t), v);
        for a in 0..3 {
            mean[a] += p[a] / k;
        }
    }
    let norms: Vec<f64> = (0..seq.rows())
        .map(|t| {
            let p = point(seq.row(t), v);
            match conv {
                FddConvention::NormOfDeviation => dist(p, mean),
                FddConvention::DeviationOfNorm => dist(p, [0.0; 3]),
            }
        })
        .collect();
    let mu = norms.iter().sum::<f64>() / k;
    (norms.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / k).sqrt()
}

/// Mean over upper-face vertices of `dyn(pred) - dyn(gt)`.
pub fn fdd<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, upper: &[usize], conv: FddConvention) -> Result<f64> {
    check_pair(pred, gt)?;
    check_subset(upper, pred.cols() / 3, "upper-face")?;
    if pred.rows() < 2 {
        return Err(contract_err!("face dynamics need at least 2 frames, got {}", pred.rows()));
    }
    let s: f64 = upper.iter().map(|&v| dynamics(pred, v, conv) - dynamics(gt, v, conv)).sum();
    Ok(s / upper.len() as f64)
}

/// Mean over frames of the absolute mouth-opening difference.
pub fn mod_metric<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, mask: &VertexMask) -> Result<f64> {
    check_pair(pred, gt)?;
    if pred.rows() == 0 {
        return Err(contract_err!("empty sequence"));
    }
    let (a, b) = (mouth_opening(pred, mask)?, mouth_opening(gt, mask)?);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub name: String,
    pub lve: f64,
    pub fdd: f64,
    #[serde(rename = "mod")]
    pub mod_: f64,
}

/// Aggregate and per-sequence metrics, already multiplied by `scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub lve: f64,
    pub fdd: f64,
    #[serde(rename = "mod")]
    pub mod_: f64,
    pub scale: f64,
    pub fdd_convention: FddConvention,
    pub sequences: Vec<SequenceMetrics>,
}

impl EvalReport {
    /// Evaluates `(name, pred, gt)` vertex sequences.
    pub fn evaluate<T: Real>(seqs: &[(String, Tensor<T>, Tensor<T>)], mask: &VertexMask, scale: f64, conv: FddConvention) -> Result<Self> {
        if seqs.is_empty() {
            return Err(contract_err!("nothing to evaluate"));
        }
        let mut sequences = Vec::with_capacity(seqs.len());
        for (name, p, g) in seqs {
            sequences.push(SequenceMetrics {
                name: name.clone(),
                lve: scale * lve(p, g, &mask.lips)?,
                fdd: scale * fdd(p, g, &mask.upper_face, conv)?,
                mod_: scale * mod_metric(p, g, mask)?,
            });
        }
        let n = sequences.len() as f64;
        Ok(EvalReport {
            lve: sequences.iter().map(|s| s.lve).sum::<f64>() / n,
            fdd: sequences.iter().map(|s| s.fdd).sum::<f64>() / n,
            mod_: sequences.iter().map(|s| s.mod_).sum::<f64>() / n,
            scale,
            fdd_convention: conv,
            sequences,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fixed-width table with one row per sequence and a mean row.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<24} {:>12} {:>12} {:>12}", "sequence", "LVE", "FDD", "MOD").unwrap();
        for q in &self.sequences {
            writeln!(s, "{:<24} {:>12.6} {:>12.6} {:>12.6}", q.name, q.lve, q.fdd, q.mod_).unwrap();
        }
        writeln!(s, "{:<24} {:>12.6} {:>12.6} {:>12.6}", "mean", self.lve, self.fdd, self.mod_).unwrap();
        s
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn seq(k: usize, n: usize, seed: u64) -> Tensor<f64> {
        Tensor::randn(&[k, 3 * n], 0.01, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn mask() -> VertexMask {
        VertexMask { lips: vec![0, 1, 2, 3], upper_face: vec![4, 5, 6], lip_upper: vec![0, 1], lip_lower: vec![2, 3] }
    }

    #[test]
    fn lve_hand_case() {
        let gt = Tensor::zeros(&[2, 6]);
        let mut p = gt.clone();
        p.row_mut(0)[3] = 0.3;
        p.row_mut(0)[5] = 0.4;
        assert!((lve(&p, &gt, &[0, 1]).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(lve(&gt, &gt, &[0, 1]).unwrap(), 0.0);
        assert!(matches!(lve(&p, &Tensor::zeros(&[3, 6]), &[0]), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn fdd_hand_cases() {
        // three frames of one vertex moving along x: deviations 1, 0, 1
        let gt = Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], vec![2.0, 0.0, 0.0]]).unwrap();
        let still = Tensor::zeros(&[3, 3]);
        let sd = ((2.0 / 3.0f64) - (2.0 / 3.0f64).powi(2)).sqrt();
        assert!((fdd(&still, &gt, &[0], FddConvention::NormOfDeviation).unwrap() + sd).abs() < 1e-12);
        assert_eq!(fdd(&gt, &gt, &[0], FddConvention::NormOfDeviation).unwrap(), 0.0);
        // two frames: both deviations equal half the step, so no spread
        let two = gt.slice_rows(0, 2);
        assert!(fdd(&Tensor::zeros(&[2, 3]), &two, &[0], FddConvention::NormOfDeviation).unwrap().abs() < 1e-15);
        // alternative convention on the same pair: norms 0 and 1, spread 0.5
        assert!((fdd(&Tensor::zeros(&[2, 3]), &two, &[0], FddConvention::DeviationOfNorm).unwrap() + 0.5).abs() < 1e-15);
        assert!(matches!(fdd(&still.slice_rows(0, 1), &gt.slice_rows(0, 1), &[0], FddConvention::default()), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn mod_constant_gap() {
        let m = mask();
        let gt = seq(5, 8, 1);
        let mut p = gt.clone();
        for t in 0..5 {
            // separate the lower lip by 2 mm along the line between lip centroids
            let o = mouth_opening(&gt.slice_rows(t, t + 1), &m).unwrap()[0];
            let f = p.row(t).to_vec();
            let cu: Vec<f64> = (0..3).map(|a| (f[a] + f[3 + a]) / 2.0).collect();
            let cl: Vec<f64> = (0..3).map(|a| (f[6 + a] + f[9 + a]) / 2.0).collect();
            for v in [2, 3] {
                for a in 0..3 {
                    p.row_mut(t)[3 * v + a] += 0.002 * (cl[a] - cu[a]) / o;
                }
            }
        }
        assert!((mod_metric(&p, &gt, &m).unwrap() - 0.002).abs() < 1e-12);
    }

    fn naive_lve(p: &Tensor<f64>, g: &Tensor<f64>, lips: &[usize]) -> f64 {
        let mut s = 0.0;
        for t in 0..p.rows() {
            let mut best = 0.0f64;
            for &v in lips {
                let mut d = 0.0;
                for a in 0..3 {
                    d += (p.at(t, 3 * v + a) - g.at(t, 3 * v + a)).powi(2);
                }
                best = best.max(d.sqrt());
            }
            s += best;
        }
        s / p.rows() as f64
    }

    fn naive_dyn(x: &Tensor<f64>, v: usize) -> f64 {
        let k = x.rows();
        let mut mean = [0.0; 3];
        for t in 0..k {
            for a in 0..3 {
                mean[a] += x.at(t, 3 * v + a);
            }
        }
        for m in &mut mean {
            *m /= k as f64;
        }
        let mut d = vec![0.0; k];
        for t in 0..k {
            let mut s = 0.0;
            for a in 0..3 {
                s += (x.at(t, 3 * v + a) - mean[a]).powi(2);
            }
            d[t] = s.sqrt();
        }
        let mu: f64 = d.iter().sum::<f64>() / k as f64;
        let mut var = 0.0;
        for x in &d {
            var += (x - mu) * (x - mu);
        }
        (var / k as f64).sqrt()
    }

    fn naive_mod(p: &Tensor<f64>, g: &Tensor<f64>, m: &VertexMask) -> f64 {
        let open = |x: &Tensor<f64>, t: usize| {
            let mut u = [0.0; 3];
            let mut l = [0.0; 3];
            for &v in &m.lip_upper {
                for a in 0..3 {
                    u[a] += x.at(t, 3 * v + a) / m.lip_upper.len() as f64;
                }
            }
            for &v in &m.lip_lower {
                for a in 0..3 {
                    l[a] += x.at(t, 3 * v + a) / m.lip_lower.len() as f64;
                }
            }
            ((u[0] - l[0]).powi(2) + (u[1] - l[1]).powi(2) + (u[2] - l[2]).powi(2)).sqrt()
        };
        (0..p.rows()).map(|t| (open(p, t) - open(g, t)).abs()).sum::<f64>() / p.rows() as f64
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn vectorised_matches_naive_loops() {
        let m = mask();
        for s in 0..20 {
            let (p, g) = (seq(7, 8, 2 * s), seq(7, 8, 2 * s + 1));
            assert!(rel(lve(&p, &g, &m.lips).unwrap(), naive_lve(&p, &g, &m.lips)) < 1e-9);
            let want: f64 = m.upper_face.iter().map(|&v| naive_dyn(&p, v) - naive_dyn(&g, v)).sum::<f64>() / 3.0;
            assert!(rel(fdd(&p, &g, &m.upper_face, FddConvention::NormOfDeviation).unwrap(), want) < 1e-9);
            assert!(rel(mod_metric(&p, &g, &m).unwrap(), naive_mod(&p, &g, &m)) < 1e-9);
        }
    }

    #[test]
    fn symmetric_and_translation_invariant() {
        let m = mask();
        let (p, g) = (seq(6, 8, 40), seq(6, 8, 41));
        assert!((lve(&p, &g, &m.lips).unwrap() - lve(&g, &p, &m.lips).unwrap()).abs() < 1e-15);
        assert!((mod_metric(&p, &g, &m).unwrap() - mod_metric(&g, &p, &m).unwrap()).abs() < 1e-15);
        let shift = |x: &Tensor<f64>| {
            let mut y = x.clone();
            for t in 0..y.rows() {
                for (i, v) in y.row_mut(t).iter_mut().enumerate() {
                    *v += [0.3, -0.1, 0.7][i % 3];
                }
            }
            y
        };
        let (ps, gs) = (shift(&p), shift(&g));
        assert!((lve(&p, &g, &m.lips).unwrap() - lve(&ps, &gs, &m.lips).unwrap()).abs() < 1e-12);
        let f = |a, b| fdd(a, b, &m.upper_face, FddConvention::NormOfDeviation).unwrap();
        assert!((f(&p, &g) - f(&ps, &gs)).abs() < 1e-12);
        assert!((mod_metric(&p, &g, &m).unwrap() - mod_metric(&ps, &gs, &m).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn report_aggregates_per_sequence_means() {
        let m = mask();
        let seqs: Vec<_> = (0..3).map(|i| (format!("s{i}"), seq(5, 8, 50 + i), seq(5, 8, 60 + i))).collect();
        let r = EvalReport::evaluate(&seqs, &m, 1000.0, FddConvention::default()).unwrap();
        let mean = r.sequences.iter().map(|s| s.lve).sum::<f64>() / 3.0;
        assert!((r.lve - mean).abs() < 1e-12);
        assert!((r.sequences[0].lve - 1000.0 * lve(&seqs[0].1, &seqs[0].2, &m.lips).unwrap()).abs() < 1e-9);
        assert!(r.to_json().unwrap().contains("\"mod\""));
        assert_eq!(r.to_table().lines().count(), 5);
    }
}
