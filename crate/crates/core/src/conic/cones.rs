//! Per-block cone arithmetic: Nesterov–Todd scaling, Jordan products and
//! step-length limits.
//!
//! Scaling convention: for primal `x` and dual `z` in the interior, `W`
//! satisfies `W⁻ᵀ x = W z = λ`. Directions are moved into the scaled space
//! with `W⁻ᵀ Δx` and `W Δz`.

use std::f64::consts::SQRT_2;

use nalgebra::{DMatrix, DVector};

use super::Cone;

pub fn svec_len(side: usize) -> usize {
    side * (side + 1) / 2
}

/// Packs the upper triangle of a symmetric matrix column by column,
/// off-diagonal entries scaled by √2.
pub fn svec(m: &DMatrix<f64>) -> Vec<f64> {
    let s = m.nrows();
    let mut out = Vec::with_capacity(svec_len(s));
    for j in 0..s {
        for i in 0..j {
            out.push(SQRT_2 * 0.5 * (m[(i, j)] + m[(j, i)]));
        }
        out.push(m[(j, j)]);
    }
    out
}

/// Inverse of [`svec`].
pub fn smat(v: &[f64], side: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(side, side);
    let mut idx = 0;
    for j in 0..side {
        for i in 0..j {
            let val = v[idx] / SQRT_2;
            m[(i, j)] = val;
            m[(j, i)] = val;
            idx += 1;
        }
        m[(j, j)] = v[idx];
        idx += 1;
    }
    m
}

/// Position of entry `(i, j)` (any order) inside `svec` of the given side.
pub fn svec_index(i: usize, j: usize) -> usize {
    let (r, c) = if i <= j { (i, j) } else { (j, i) };
    c * (c + 1) / 2 + r
}

fn soc_jdot(x: &[f64]) -> f64 {
    x[0] * x[0] - x[1..].iter().map(|v| v * v).sum::<f64>()
}

#[derive(Debug, Clone)]
pub enum BlockScaling {
    NonNeg {
        /// `sqrt(x / z)`
        w: Vec<f64>,
        lambda: Vec<f64>,
    },
    Soc {
        w: DMatrix<f64>,
        w_inv: DMatrix<f64>,
        lambda: Vec<f64>,
    },
    Psd {
        /// `W z = Rᵀ Z R`, `W⁻ᵀ x = R⁻¹ X R⁻ᵀ`.
        r: DMatrix<f64>,
        r_inv: DMatrix<f64>,
        /// `R Rᵀ`; `WᵀW z = T Z T`.
        t: DMatrix<f64>,
        lambda: Vec<f64>,
    },
}

#[derive(Debug)]
pub struct ScalingFailure;

impl BlockScaling {
    pub fn new(cone: Cone, x: &[f64], z: &[f64]) -> Result<Self, ScalingFailure> {
        match cone {
            Cone::NonNeg(_) => {
                if x.iter().chain(z).any(|&v| !(v > 0.0)) {
                    return Err(ScalingFailure);
                }
                let w = x.iter().zip(z).map(|(a, b)| (a / b).sqrt()).collect();
                let lambda = x.iter().zip(z).map(|(a, b)| (a * b).sqrt()).collect();
                Ok(Self::NonNeg { w, lambda })
            }
            Cone::Soc(d) => {
                let xj = soc_jdot(x);
                let zj = soc_jdot(z);
                if !(xj > 0.0 && zj > 0.0 && x[0] > 0.0 && z[0] > 0.0) {
                    return Err(ScalingFailure);
                }
                let (xs, zs) = (xj.sqrt(), zj.sqrt());
                let xbar: Vec<f64> = x.iter().map(|v| v / xs).collect();
                let zbar: Vec<f64> = z.iter().map(|v| v / zs).collect();
                let dot: f64 = xbar.iter().zip(&zbar).map(|(a, b)| a * b).sum();
                let gamma = ((1.0 + dot) / 2.0).sqrt();
                let beta = (xj / zj).sqrt().sqrt();
                // NT point w̄ = (x̄ + J z̄) / (2γ); W uses its Jordan square root.
                let mut wbar = vec![0.0; d];
                wbar[0] = (xbar[0] + zbar[0]) / (2.0 * gamma);
                for i in 1..d {
                    wbar[i] = (xbar[i] - zbar[i]) / (2.0 * gamma);
                }
                let root = (2.0 * (wbar[0] + 1.0)).sqrt();
                let mut v = wbar;
                v[0] += 1.0;
                for vi in &mut v {
                    *vi /= root;
                }
                let mut w = DMatrix::zeros(d, d);
                let mut w_inv = DMatrix::zeros(d, d);
                let jv: Vec<f64> = (0..d).map(|i| if i == 0 { v[0] } else { -v[i] }).collect();
                for i in 0..d {
                    for j in 0..d {
                        let jij = if i == j { if i == 0 { 1.0 } else { -1.0 } } else { 0.0 };
                        w[(i, j)] = beta * (2.0 * v[i] * v[j] - jij);
                        w_inv[(i, j)] = (2.0 * jv[i] * jv[j] - jij) / beta;
                    }
                }
                let lambda = (&w * DVector::from_column_slice(z)).as_slice().to_vec();
                Ok(Self::Soc { w, w_inv, lambda })
            }
            Cone::Psd(s) => {
                let xm = smat(x, s);
                let zm = smat(z, s);
                let lx = xm.cholesky().ok_or(ScalingFailure)?.l();
                let lz = zm.clone().cholesky().ok_or(ScalingFailure)?.l();
                // (Lzᵀ Lx)ᵀ (Lzᵀ Lx) = V Λ² Vᵀ
                let prod = lz.transpose() * &lx;
                let gram = prod.transpose() * &prod;
                let eig = gram.symmetric_eigen();
                let sv: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
                if sv.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
                    return Err(ScalingFailure);
                }
                // R = Lx V Λ^{-1/2};  R⁻¹ = Λ⁻¹ Rᵀ Z
                let mut r = &lx * &eig.eigenvectors;
                for (j, &l) in sv.iter().enumerate() {
                    r.column_mut(j).scale_mut(1.0 / l.sqrt());
                }
                let mut r_inv = r.transpose() * &zm;
                for (i, &l) in sv.iter().enumerate() {
                    r_inv.row_mut(i).scale_mut(1.0 / l);
                }
                let t = &r * r.transpose();
                let t = 0.5 * (&t + t.transpose());
                let mut lambda_mat = DMatrix::zeros(s, s);
                for (i, &l) in sv.iter().enumerate() {
                    lambda_mat[(i, i)] = l;
                }
                Ok(Self::Psd {
                    r,
                    r_inv,
                    t,
                    lambda: svec(&lambda_mat),
                })
            }
        }
    }

    pub fn lambda(&self) -> &[f64] {
        match self {
            Self::NonNeg { lambda, .. } | Self::Soc { lambda, .. } | Self::Psd { lambda, .. } => lambda,
        }
    }

    /// `W Δz`
    pub fn apply_w(&self, dz: &[f64], out: &mut [f64]) {
        match self {
            Self::NonNeg { w, .. } => {
                for i in 0..w.len() {
                    out[i] = w[i] * dz[i];
                }
            }
            Self::Soc { w, .. } => mat_vec(w, dz, out),
            Self::Psd { r, .. } => {
                let s = r.nrows();
                let m = r.transpose() * smat(dz, s) * r;
                out.copy_from_slice(&svec(&m));
            }
        }
    }

    /// `Wᵀ q`
    pub fn apply_wt(&self, q: &[f64], out: &mut [f64]) {
        match self {
            Self::NonNeg { w, .. } => {
                for i in 0..w.len() {
                    out[i] = w[i] * q[i];
                }
            }
            Self::Soc { w, .. } => mat_vec(w, q, out),
            Self::Psd { r, .. } => {
                let s = r.nrows();
                let m = r * smat(q, s) * r.transpose();
                out.copy_from_slice(&svec(&m));
            }
        }
    }

    /// `W⁻ᵀ Δx`
    pub fn apply_winv_t(&self, dx: &[f64], out: &mut [f64]) {
        match self {
            Self::NonNeg { w, .. } => {
                for i in 0..w.len() {
                    out[i] = dx[i] / w[i];
                }
            }
            Self::Soc { w_inv, .. } => mat_vec(w_inv, dx, out),
            Self::Psd { r_inv, .. } => {
                let s = r_inv.nrows();
                let m = r_inv * smat(dx, s) * r_inv.transpose();
                out.copy_from_slice(&svec(&m));
            }
        }
    }

    /// `WᵀW Δz`
    pub fn apply_h(&self, dz: &[f64], out: &mut [f64]) {
        match self {
            Self::NonNeg { w, .. } => {
                for i in 0..w.len() {
                    out[i] = w[i] * w[i] * dz[i];
                }
            }
            Self::Soc { w, .. } => {
                let mut tmp = vec![0.0; dz.len()];
                mat_vec(w, dz, &mut tmp);
                mat_vec(w, &tmp, out);
            }
            Self::Psd { t, .. } => {
                let s = t.nrows();
                let m = t * smat(dz, s) * t;
                out.copy_from_slice(&svec(&m));
            }
        }
    }
}

fn mat_vec(m: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    let n = m.nrows();
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..m.ncols() {
            acc += m[(i, j)] * v[j];
        }
        out[i] = acc;
    }
}

/// Identity element of the block.
pub fn identity(cone: Cone, out: &mut [f64]) {
    out.fill(0.0);
    match cone {
        Cone::NonNeg(_) => out.fill(1.0),
        Cone::Soc(_) => out[0] = 1.0,
        Cone::Psd(s) => {
            for j in 0..s {
                out[svec_index(j, j)] = 1.0;
            }
        }
    }
}

/// Jordan product `u ∘ v`.
pub fn jordan_product(cone: Cone, u: &[f64], v: &[f64], out: &mut [f64]) {
    match cone {
        Cone::NonNeg(_) => {
            for i in 0..u.len() {
                out[i] = u[i] * v[i];
            }
        }
        Cone::Soc(_) => {
            out[0] = u.iter().zip(v).map(|(a, b)| a * b).sum();
            for i in 1..u.len() {
                out[i] = u[0] * v[i] + v[0] * u[i];
            }
        }
        Cone::Psd(s) => {
            let um = smat(u, s);
            let vm = smat(v, s);
            let p = &um * &vm;
            let sym = 0.5 * (&p + p.transpose());
            out.copy_from_slice(&svec(&sym));
        }
    }
}

/// Solves `λ ∘ q = r` for `q`, with `λ` as produced by [`BlockScaling`]
/// (diagonal for PSD blocks).
pub fn jordan_solve(cone: Cone, lambda: &[f64], r: &[f64], out: &mut [f64]) {
    match cone {
        Cone::NonNeg(_) => {
            for i in 0..r.len() {
                out[i] = r[i] / lambda[i];
            }
        }
        Cone::Soc(_) => {
            let l0 = lambda[0];
            let det = soc_jdot(lambda);
            let lr: f64 = lambda[1..].iter().zip(&r[1..]).map(|(a, b)| a * b).sum();
            let q0 = (l0 * r[0] - lr) / det;
            out[0] = q0;
            for i in 1..r.len() {
                out[i] = (r[i] - q0 * lambda[i]) / l0;
            }
        }
        Cone::Psd(s) => {
            let diag: Vec<f64> = (0..s).map(|j| lambda[svec_index(j, j)]).collect();
            let mut idx = 0;
            for j in 0..s {
                for i in 0..=j {
                    out[idx] = 2.0 * r[idx] / (diag[i] + diag[j]);
                    idx += 1;
                }
            }
        }
    }
}

/// Largest `α` in `[0, cap]` with `λ + α d` in the cone; `cap` may be infinite.
pub fn max_step(cone: Cone, lambda: &[f64], d: &[f64], cap: f64) -> f64 {
    let alpha = match cone {
        Cone::NonNeg(_) => lambda
            .iter()
            .zip(d)
            .filter(|(_, &di)| di < 0.0)
            .map(|(&l, &di)| -l / di)
            .fold(f64::INFINITY, f64::min),
        Cone::Soc(_) => {
            // f(α) = (λ0 + α d0)² − ‖λ̄ + α d̄‖² = a α² + 2 b α + c, c > 0.
            let a = soc_jdot(d);
            let b = lambda[0] * d[0] - lambda[1..].iter().zip(&d[1..]).map(|(x, y)| x * y).sum::<f64>();
            let c = soc_jdot(lambda);
            smallest_positive_root(a, b, c)
        }
        Cone::Psd(s) => {
            let diag: Vec<f64> = (0..s).map(|j| 1.0 / lambda[svec_index(j, j)].sqrt()).collect();
            let mut m = smat(d, s);
            for i in 0..s {
                for j in 0..s {
                    m[(i, j)] *= diag[i] * diag[j];
                }
            }
            if cap.is_finite() {
                let mut shifted = &m * cap;
                for i in 0..s {
                    shifted[(i, i)] += 1.0;
                }
                if shifted.cholesky().is_some() {
                    return cap;
                }
            }
            let min_eig = m.symmetric_eigenvalues().min();
            if min_eig >= 0.0 {
                f64::INFINITY
            } else {
                -1.0 / min_eig
            }
        }
    };
    alpha.min(cap)
}

fn smallest_positive_root(a: f64, b: f64, c: f64) -> f64 {
    // Roots of a α² + 2 b α + c with c > 0.
    if a == 0.0 {
        return if b < 0.0 { -c / (2.0 * b) } else { f64::INFINITY };
    }
    let disc = b * b - a * c;
    if disc < 0.0 {
        // No real root: f keeps the sign of c, positive for all α.
        return f64::INFINITY;
    }
    let sq = disc.sqrt();
    // Numerically stable pair.
    let q = -(b + b.signum() * sq);
    let r1 = if q != 0.0 { c / q } else { f64::INFINITY };
    let r2 = q / a;
    [r1, r2]
        .into_iter()
        .filter(|r| *r > 0.0)
        .fold(f64::INFINITY, f64::min)
}
