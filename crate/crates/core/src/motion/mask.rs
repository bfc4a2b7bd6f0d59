use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::numerics::{Real, Tensor};

/// Vertex index sets for the loss terms and metrics.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VertexMask {
    pub lips: Vec<usize>,
    pub upper_face: Vec<usize>,
    pub lip_upper: Vec<usize>,
    pub lip_lower: Vec<usize>,
}

impl VertexMask {
    /// Checks uniqueness, range and the subset/disjointness rules.
    pub fn validate(&self, vertex_count: usize) -> Result<()> {
        for (name, set) in [
            ("lips", &self.lips),
            ("upper_face", &self.upper_face),
            ("lip_upper", &self.lip_upper),
            ("lip_lower", &self.lip_lower),
        ] {
            let uniq: HashSet<_> = set.iter().collect();
            if uniq.len() != set.len() {
                return Err(contract_err!("{name} contains duplicate indices"));
            }
            if let Some(&bad) = set.iter().find(|&&i| i >= vertex_count) {
                return Err(dim_err!("{name} index {bad} out of range for {vertex_count} vertices"));
            }
        }
        let lips: HashSet<_> = self.lips.iter().collect();
        if self.upper_face.iter().any(|i| lips.contains(i)) {
            return Err(contract_err!("lips and upper_face overlap"));
        }
        if self.lip_upper.iter().chain(&self.lip_lower).any(|i| !lips.contains(i)) {
            return Err(contract_err!("lip_upper/lip_lower must be subsets of lips"));
        }
        let upper: HashSet<_> = self.lip_upper.iter().collect();
        if self.lip_lower.iter().any(|i| upper.contains(i)) {
            return Err(contract_err!("lip_upper and lip_lower overlap"));
        }
        Ok(())
    }

    /// Mask matching [`crate::motion::FlameBasis::synthetic`].
    pub fn synthetic() -> Self {
        VertexMask {
            lips: (0..16).collect(),
            upper_face: (16..40).collect(),
            lip_upper: (0..8).collect(),
            lip_lower: (8..16).collect(),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn centroid<T: Real>(frame: &[T], idx: &[usize]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for &v in idx {
        for (a, ca) in c.iter_mut().enumerate() {
            *ca += frame[3 * v + a].as_f64();
        }
    }
    c.map(|x| x / idx.len() as f64)
}

/// Per-frame distance between the upper- and lower-lip centroids.
///
/// `vertices` is `K x 3N`.
pub fn mouth_opening<T: Real>(vertices: &Tensor<T>, mask: &VertexMask) -> Result<Vec<f64>> {
    if mask.lip_upper.is_empty() || mask.lip_lower.is_empty() {
        return Err(contract_err!("mouth opening needs non-empty lip_upper and lip_lower"));
    }
    let n = vertices.cols() / 3;
    if let Some(&bad) = mask.lip_upper.iter().chain(&mask.lip_lower).find(|&&i| i >= n) {
        return Err(dim_err!("lip index {bad} out of range for {n} vertices"));
    }
    Ok((0..vertices.rows())
        .map(|t| {
            let f = vertices.row(t);
            let (u, l) = (centroid(f, &mask.lip_upper), centroid(f, &mask.lip_lower));
            ((u[0] - l[0]).powi(2) + (u[1] - l[1]).powi(2) + (u[2] - l[2]).powi(2)).sqrt()
        })
        .collect())
}
