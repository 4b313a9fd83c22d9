//! Independent reference computations used by tests and by `selftest`.
//!
//! Everything here is deliberately naive and shares no code with the
//! routines it checks.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;

use crate::conic::{svec, Cone, ConicProblem};

/// `Q(x)` by adaptive Simpson quadrature of the Gaussian tail.
pub fn q_quadrature(x: f64) -> f64 {
    if x < 0.0 {
        return 1.0 - q_quadrature(-x);
    }
    // Q(x) = φ(x) ∫₀^∞ exp(−x s − s²/2) ds
    let g = |s: f64| (-x * s - 0.5 * s * s).exp();
    let upper = 40.0;
    let mut total = 0.0;
    // Split so each panel starts with a smooth, slowly varying integrand.
    let edges = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, upper];
    for w in edges.windows(2) {
        total += adaptive_simpson(&g, w[0], w[1], 1e-17, 60);
    }
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt() * total
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Inverse of [`q_quadrature`] by bisection.
pub fn q_inverse_bisection(p: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if q_quadrature(mid) > p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// All set partitions of `0..n` built by recursive insertion.
pub fn naive_partitions(n: usize) -> Vec<Vec<Vec<usize>>> {
    fn rec(next: usize, n: usize, current: &mut Vec<Vec<usize>>, out: &mut Vec<Vec<Vec<usize>>>) {
        if next == n {
            out.push(current.clone());
            return;
        }
        for b in 0..current.len() {
            current[b].push(next);
            rec(next + 1, n, current, out);
            current[b].pop();
        }
        current.push(vec![next]);
        rec(next + 1, n, current, out);
        current.pop();
    }
    let mut out = Vec::new();
    if n > 0 {
        rec(0, n, &mut Vec::new(), &mut out);
    }
    out
}

/// Brute force over `ρ` of `min Tr(C V)` with `V = [[1, ρ], [ρ, 1]]`.
pub fn brute_force_2x2_sdp(c: [[f64; 2]; 2], grid: usize) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..=grid {
        let rho = -1.0 + 2.0 * i as f64 / grid as f64;
        let val = c[0][0] + c[1][1] + rho * (c[0][1] + c[1][0]);
        if val < best.0 {
            best = (val, rho);
        }
    }
    best
}

/// Single-user optimum `P (|h| + Σ|φ_n|)² / σ²`.
pub fn single_user_optimal_snr(h: Complex64, phi: &[Complex64], tx_power_w: f64, noise_power_w: f64) -> f64 {
    let amp = h.norm() + phi.iter().map(|p| p.norm()).sum::<f64>();
    tx_power_w * amp * amp / noise_power_w
}

/// A conic instance with a known primal–dual optimal pair.
#[derive(Debug, Clone)]
pub struct PlantedInstance {
    pub problem: ConicProblem,
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DVector<f64>,
    pub optimal_value: f64,
}

/// Draws a mixed nonnegative/SOC/PSD instance with at most `max_dim`
/// coordinates.
///
/// `x*` and `z*` are strictly complementary, and the constraint rows are
/// chosen so that both the primal and the dual have interior points.
pub fn planted_instance<R: Rng + ?Sized>(rng: &mut R, max_dim: usize) -> PlantedInstance {
    loop {
        if let Some(inst) = try_planted(rng, max_dim) {
            return inst;
        }
    }
}

fn try_planted<R: Rng + ?Sized>(rng: &mut R, max_dim: usize) -> Option<PlantedInstance> {
    let mut cones = Vec::new();
    let mut used = 0;
    loop {
        let cone = match rng.random_range(0..3) {
            0 => Cone::NonNeg(rng.random_range(1..=4)),
            1 => Cone::Soc(rng.random_range(2..=5)),
            _ => Cone::Psd(rng.random_range(1..=4)),
        };
        if used + cone.dim() > max_dim {
            if cones.is_empty() {
                continue;
            }
            break;
        }
        used += cone.dim();
        cones.push(cone);
        if rng.random::<f64>() < 0.3 {
            break;
        }
    }
    let n = used;
    let mut xs = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n);
    for &k in &cones {
        let (xb, zb) = complementary_pair(rng, k);
        xs.extend(xb);
        zs.extend(zb);
    }
    let x = DVector::from_vec(xs);
    let z = DVector::from_vec(zs);
    if x.norm() < 0.1 || z.norm() < 0.1 {
        return None;
    }

    // Primal direction u lies in ker A, dual direction w in the row space.
    let a_coef = -0.5 * z.norm_squared() / x.norm_squared().max(1e-300);
    let u = &z - &x * a_coef;
    let w = &x - &z * 0.5;
    let m = if n > 1 { rng.random_range(1..n) } else { 1 };
    let mut a = DMatrix::zeros(m, n);
    a.row_mut(0).copy_from(&w.transpose());
    for i in 1..m {
        let g = DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let g = &g - &u * (g.dot(&u) / u.norm_squared());
        a.row_mut(i).copy_from(&g.transpose());
    }
    let y = DVector::from_fn(m, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let b = &a * &x;
    let c = a.tr_mul(&y) + &z;
    let optimal_value = c.dot(&x);
    Some(PlantedInstance {
        problem: ConicProblem::new(c, a, b, cones),
        x,
        y,
        z,
        optimal_value,
    })
}

fn complementary_pair<R: Rng + ?Sized>(rng: &mut R, cone: Cone) -> (Vec<f64>, Vec<f64>) {
    let mut pos = || 0.2 + rng.random::<f64>();
    match cone {
        Cone::NonNeg(d) => {
            let mut x = vec![0.0; d];
            let mut z = vec![0.0; d];
            for i in 0..d {
                if i % 2 == 0 {
                    x[i] = pos();
                } else {
                    z[i] = pos();
                }
            }
            (x, z)
        }
        Cone::Soc(d) => {
            let dir: Vec<f64> = (1..d).map(|_| rng.random::<f64>() - 0.5).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
            let (r1, r2) = (0.2 + rng.random::<f64>(), 0.2 + rng.random::<f64>());
            let mut x = vec![r1];
            let mut z = vec![r2];
            x.extend(dir.iter().map(|v| r1 * v / norm));
            z.extend(dir.iter().map(|v| -r2 * v / norm));
            (x, z)
        }
        Cone::Psd(s) => {
            let g = DMatrix::from_fn(s, s, |_, _| rng.random::<f64>() - 0.5);
            let q = g.qr().q();
            let rank = rng.random_range(0..=s);
            let mut dx = DMatrix::zeros(s, s);
            let mut dz = DMatrix::zeros(s, s);
            for i in 0..s {
                if i < rank {
                    dx[(i, i)] = 0.2 + rng.random::<f64>();
                } else {
                    dz[(i, i)] = 0.2 + rng.random::<f64>();
                }
            }
            let xm = &q * dx * q.transpose();
            let zm = &q * dz * q.transpose();
            (svec(&xm), svec(&zm))
        }
    }
}
