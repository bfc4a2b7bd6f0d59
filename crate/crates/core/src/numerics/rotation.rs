//! Axis-angle rotation matrices and their derivatives.
//!
//! `R(w) = I + A(s) [w]x + B(s) [w]x^2` with `s = |w|^2`,
//! `A = sin(a)/a`, `B = (1 - cos a)/a^2`. Both coefficients are smooth in `s`,
//! so small angles use truncated Taylor series instead of the closed forms.

pub type Mat3 = [[f64; 3]; 3];

const SERIES_CUTOFF: f64 = 1e-2;

fn coeffs(s: f64) -> (f64, f64, f64, f64) {
    if s < SERIES_CUTOFF {
        let a = 1.0 - s / 6.0 + s * s / 120.0 - s * s * s / 5040.0 + s.powi(4) / 362_880.0;
        let da = -1.0 / 6.0 + s / 60.0 - s * s / 1680.0 + s * s * s / 90_720.0;
        let b = 0.5 - s / 24.0 + s * s / 720.0 - s * s * s / 40_320.0 + s.powi(4) / 3_628_800.0;
        let db = -1.0 / 24.0 + s / 360.0 - s * s / 13_440.0 + s * s * s / 907_200.0;
        (a, da, b, db)
    } else {
        let t = s.sqrt();
        let (sn, cs) = t.sin_cos();
        let a = sn / t;
        let b = (1.0 - cs) / s;
        let da = (t * cs - sn) / (2.0 * t * s);
        let db = (t * sn - 2.0 * (1.0 - cs)) / (2.0 * s * s);
        (a, da, b, db)
    }
}

fn skew(w: [f64; 3]) -> Mat3 {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

fn mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn rodrigues(w: [f64; 3]) -> Mat3 {
    let s = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, _, b, _) = coeffs(s);
    let k = skew(w);
    let k2 = mul(&k, &k);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = if i == j { 1.0 } else { 0.0 } + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// `dR/dw_i` for `i = 0..3`.
pub fn rodrigues_grad(w: [f64; 3]) -> [Mat3; 3] {
    let s = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, da, b, db) = coeffs(s);
    let k = skew(w);
    let k2 = mul(&k, &k);
    let mut out = [[[0.0; 3]; 3]; 3];
    for (i, d) in out.iter_mut().enumerate() {
        let mut unit = [0.0; 3];
        unit[i] = 1.0;
        let e = skew(unit);
        let ek = mul(&e, &k);
        let ke = mul(&k, &e);
        for r in 0..3 {
            for c in 0..3 {
                d[r][c] = 2.0 * w[i] * (da * k[r][c] + db * k2[r][c])
                    + a * e[r][c]
                    + b * (ek[r][c] + ke[r][c]);
            }
        }
    }
    out
}
