//! Homogeneous self-dual predictor–corrector.

use std::f64::consts::SQRT_2;

use nalgebra::{DMatrix, DVector};

use super::cones::{self, BlockScaling};
use super::{residuals, Cone, ConicError, ConicProblem, ConicSolution, Residuals, SolverSettings, Status};

const STEP_FRACTION: f64 = 0.99;
const MIN_STEP: f64 = 1e-12;
/// Iterations allowed without halving the best residual once it is near `tol`.
const STALL_ITERS: usize = 8;
const STALL_BAND: f64 = 1e3;

/// Nonzeros of one row restricted to a PSD block, expanded to full
/// symmetric matrix entries `(r, c, value)`.
#[derive(Debug, Clone)]
enum PsdRow {
    Zero,
    Sparse(Vec<(usize, usize, f64)>),
    /// `Σ σ u uᵀ` with few terms.
    LowRank(Vec<(f64, DVector<f64>)>),
    Dense,
}

struct Workspace {
    cones: Vec<Cone>,
    offsets: Vec<usize>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: DVector<f64>,
    /// Indexed by block, then row; empty for non-PSD blocks.
    psd_rows: Vec<Vec<PsdRow>>,
}

impl Workspace {
    fn new(a: DMatrix<f64>, b: DVector<f64>, c: DVector<f64>, cones: Vec<Cone>) -> Self {
        let offsets: Vec<usize> = cones
            .iter()
            .scan(0, |acc, k| {
                let s = *acc;
                *acc += k.dim();
                Some(s)
            })
            .collect();
        let m = a.nrows();
        let mut psd_rows = Vec::with_capacity(cones.len());
        for (blk, &k) in cones.iter().enumerate() {
            let Cone::Psd(side) = k else {
                psd_rows.push(Vec::new());
                continue;
            };
            let mut pos = Vec::with_capacity(k.dim());
            for col in 0..side {
                for row in 0..=col {
                    pos.push((row, col));
                }
            }
            let off = offsets[blk];
            let rows = (0..m)
                .map(|i| {
                    let nz: Vec<(usize, f64)> = (0..k.dim())
                        .filter_map(|j| {
                            let v = a[(i, off + j)];
                            (v != 0.0).then_some((j, v))
                        })
                        .collect();
                    if nz.is_empty() {
                        PsdRow::Zero
                    } else if nz.len() <= 2 * side {
                        let mut entries = Vec::with_capacity(2 * nz.len());
                        for (j, v) in nz {
                            let (r, c) = pos[j];
                            if r == c {
                                entries.push((r, r, v));
                            } else {
                                entries.push((r, c, v / SQRT_2));
                                entries.push((c, r, v / SQRT_2));
                            }
                        }
                        PsdRow::Sparse(entries)
                    } else {
                        low_rank(a.row(i).columns(off, k.dim()).transpose().as_slice(), side)
                    }
                })
                .collect();
            psd_rows.push(rows);
        }
        Self {
            cones,
            offsets,
            a,
            b,
            c,
            psd_rows,
        }
    }

    fn n(&self) -> usize {
        self.c.len()
    }

    fn m(&self) -> usize {
        self.b.len()
    }

    fn blocks(&self) -> impl Iterator<Item = (Cone, std::ops::Range<usize>)> + '_ {
        self.cones.iter().zip(&self.offsets).map(|(&k, &o)| (k, o..o + k.dim()))
    }

    fn scalings(&self, x: &DVector<f64>, z: &DVector<f64>) -> Option<Vec<BlockScaling>> {
        self.blocks()
            .map(|(k, r)| BlockScaling::new(k, &x.as_slice()[r.clone()], &z.as_slice()[r]).ok())
            .collect()
    }

    fn apply(
        &self,
        sc: &[BlockScaling],
        v: &DVector<f64>,
        op: fn(&BlockScaling, &[f64], &mut [f64]),
    ) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for ((_, r), s) in self.blocks().zip(sc) {
            op(s, &v.as_slice()[r.clone()], &mut out.as_mut_slice()[r]);
        }
        out
    }

    fn lambda(&self, sc: &[BlockScaling]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n());
        for ((_, r), s) in self.blocks().zip(sc) {
            out.as_mut_slice()[r].copy_from_slice(s.lambda());
        }
        out
    }

    fn jordan(&self, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(u.len());
        for (k, r) in self.blocks() {
            cones::jordan_product(k, &u.as_slice()[r.clone()], &v.as_slice()[r.clone()], &mut out.as_mut_slice()[r]);
        }
        out
    }

    fn jordan_solve(&self, lambda: &DVector<f64>, rhs: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(rhs.len());
        for (k, r) in self.blocks() {
            cones::jordan_solve(k, &lambda.as_slice()[r.clone()], &rhs.as_slice()[r.clone()], &mut out.as_mut_slice()[r]);
        }
        out
    }

    fn identity(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.n());
        for (k, r) in self.blocks() {
            cones::identity(k, &mut out.as_mut_slice()[r]);
        }
        out
    }

    fn max_step(&self, lambda: &DVector<f64>, d: &DVector<f64>, cap: f64) -> f64 {
        self.blocks()
            .map(|(k, r)| cones::max_step(k, &lambda.as_slice()[r.clone()], &d.as_slice()[r], cap))
            .fold(f64::INFINITY, f64::min)
    }

    /// `A H Aᵀ`
    fn schur(&self, sc: &[BlockScaling]) -> DMatrix<f64> {
        let m = self.m();
        let mut out = DMatrix::zeros(m, m);
        for (blk, ((k, r), s)) in self.blocks().zip(sc).enumerate() {
            let ablk = self.a.columns(r.start, r.len());
            match (k, s) {
                (Cone::NonNeg(_), BlockScaling::NonNeg { w, .. }) => {
                    let mut scaled = ablk.clone_owned();
                    for (j, wj) in w.iter().enumerate() {
                        scaled.column_mut(j).scale_mut(wj * wj);
                    }
                    out.gemm(1.0, &scaled, &ablk.transpose(), 1.0);
                }
                (Cone::Soc(_), BlockScaling::Soc { w, .. }) => {
                    let wa = w * ablk.transpose();
                    out.gemm(1.0, &wa.transpose(), &wa, 1.0);
                }
                (Cone::Psd(side), BlockScaling::Psd { t, .. }) => {
                    self.psd_schur(blk, side, t, &ablk.clone_owned(), &mut out);
                }
                _ => unreachable!("scaling kind matches cone kind"),
            }
        }
        out
    }

    fn psd_schur(&self, blk: usize, side: usize, t: &DMatrix<f64>, ablk: &DMatrix<f64>, out: &mut DMatrix<f64>) {
        let rows = &self.psd_rows[blk];
        let m = rows.len();
        // svec(T A_q T) for dense rows, T u for low-rank factors.
        let mut dense_img: Vec<Option<DVector<f64>>> = vec![None; m];
        let mut tu: Vec<Vec<DVector<f64>>> = vec![Vec::new(); m];
        for q in 0..m {
            match &rows[q] {
                PsdRow::Dense => {
                    let aq = cones::smat(ablk.row(q).transpose().as_slice(), side);
                    let img = t * aq * t;
                    dense_img[q] = Some(DVector::from_vec(cones::svec(&img)));
                }
                PsdRow::LowRank(terms) => {
                    tu[q] = terms.iter().map(|(_, u)| t * u).collect();
                }
                _ => {}
            }
        }
        for p in 0..m {
            for q in 0..=p {
                let val = match (&rows[p], &rows[q]) {
                    (PsdRow::Zero, _) | (_, PsdRow::Zero) => continue,
                    (_, PsdRow::Dense) => {
                        let img = dense_img[q].as_ref().expect("dense image");
                        ablk.row(p).transpose().dot(img)
                    }
                    (PsdRow::Dense, _) => {
                        let img = dense_img[p].as_ref().expect("dense image");
                        ablk.row(q).transpose().dot(img)
                    }
                    (PsdRow::Sparse(ep), PsdRow::Sparse(eq)) => {
                        let mut acc = 0.0;
                        for &(a, b, u) in ep {
                            for &(c, d, w) in eq {
                                acc += u * w * t[(b, c)] * t[(d, a)];
                            }
                        }
                        acc
                    }
                    (PsdRow::Sparse(e), PsdRow::LowRank(terms)) => sparse_low_rank(e, terms, &tu[q]),
                    (PsdRow::LowRank(terms), PsdRow::Sparse(e)) => sparse_low_rank(e, terms, &tu[p]),
                    (PsdRow::LowRank(tp), PsdRow::LowRank(tq)) => {
                        let mut acc = 0.0;
                        for ((sa, _), tua) in tp.iter().zip(&tu[p]) {
                            for (sb, ub) in tq {
                                let d = tua.dot(ub);
                                acc += sa * sb * d * d;
                            }
                        }
                        acc
                    }
                };
                out[(p, q)] += val;
                if p != q {
                    out[(q, p)] += val;
                }
            }
        }
    }
}

/// `Tr(A T B T)` for sparse `A` and `B = Σ σ u uᵀ`, given the products `T u`.
fn sparse_low_rank(entries: &[(usize, usize, f64)], terms: &[(f64, DVector<f64>)], tu: &[DVector<f64>]) -> f64 {
    let mut acc = 0.0;
    for &(r, c, w) in entries {
        for ((sigma, _), v) in terms.iter().zip(tu) {
            acc += w * sigma * v[r] * v[c];
        }
    }
    acc
}

fn low_rank(row: &[f64], side: usize) -> PsdRow {
    let mat = cones::smat(row, side);
    let eig = mat.symmetric_eigen();
    let scale = eig.eigenvalues.amax();
    let keep: Vec<usize> = (0..side).filter(|&i| eig.eigenvalues[i].abs() > 1e-13 * scale).collect();
    if keep.len() * 4 > side {
        return PsdRow::Dense;
    }
    let terms = keep
        .into_iter()
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).clone_owned()))
        .collect();
    PsdRow::LowRank(terms)
}

enum Factor {
    Chol(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl Factor {
    fn new(mut m: DMatrix<f64>) -> Self {
        let scale = m.diagonal().iter().copied().fold(0.0, f64::max).max(1e-300);
        let reg = 1e-14 * scale;
        for i in 0..m.nrows() {
            m[(i, i)] += reg;
        }
        match m.clone().cholesky() {
            Some(ch) => Factor::Chol(ch),
            None => Factor::Lu(m.lu()),
        }
    }

    fn solve(&self, m: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
        let once = |r: &DVector<f64>| -> Option<DVector<f64>> {
            match self {
                Factor::Chol(ch) => Some(ch.solve(r)),
                Factor::Lu(lu) => lu.solve(r),
            }
        };
        let mut y = once(rhs)?;
        // One round of refinement against the unregularized matrix.
        let res = rhs - m * &y;
        y += once(&res)?;
        y.iter().all(|v| v.is_finite()).then_some(y)
    }
}

struct Iterate {
    x: DVector<f64>,
    y: DVector<f64>,
    z: DVector<f64>,
    tau: f64,
    kappa: f64,
}

struct Direction {
    dx: DVector<f64>,
    dy: DVector<f64>,
    dz: DVector<f64>,
    dtau: f64,
    dkappa: f64,
}

/// Solves the problem to relative residual `settings.tol`.
///
/// Deterministic: the same problem data always yields the same iterates.
pub fn solve(problem: &ConicProblem, settings: &SolverSettings) -> Result<ConicSolution, ConicError> {
    if !(1e-10..=1e-4).contains(&settings.tol) {
        return Err(ConicError::Tolerance(settings.tol));
    }
    problem.validate()?;
    let n = problem.num_vars();
    let m0 = problem.num_rows();

    // Row equilibration; zero rows are dropped or certify infeasibility.
    let mut kept = Vec::with_capacity(m0);
    let mut row_scale = Vec::with_capacity(m0);
    for i in 0..m0 {
        let norm = problem.a.row(i).norm();
        if norm == 0.0 {
            if problem.b[i].abs() > 0.0 {
                let mut y = DVector::zeros(m0);
                y[i] = 1.0 / problem.b[i];
                let res = Residuals {
                    primal: f64::INFINITY,
                    dual: f64::INFINITY,
                    gap: f64::INFINITY,
                };
                return Ok(ConicSolution {
                    status: Status::Infeasible,
                    x: DVector::zeros(n),
                    y,
                    z: DVector::zeros(n),
                    primal_objective: f64::INFINITY,
                    dual_objective: f64::INFINITY,
                    residuals: res,
                    iterations: 0,
                });
            }
            continue;
        }
        kept.push(i);
        row_scale.push(1.0 / norm);
    }
    let m = kept.len();
    let mut a = DMatrix::zeros(m, n);
    let mut b = DVector::zeros(m);
    for (r, (&i, &s)) in kept.iter().zip(&row_scale).enumerate() {
        a.row_mut(r).copy_from(&(problem.a.row(i) * s));
        b[r] = problem.b[i] * s;
    }
    let ws = Workspace::new(a, b, problem.c.clone(), problem.cones.clone());
    let nu: f64 = problem.cones.iter().map(|k| k.degree() as f64).sum();

    let unscale_y = |ys: &DVector<f64>| -> DVector<f64> {
        let mut y = DVector::zeros(m0);
        for (r, (&i, &s)) in kept.iter().zip(&row_scale).enumerate() {
            y[i] = ys[r] * s;
        }
        y
    };

    let e = ws.identity();
    let mut it = Iterate {
        x: e.clone(),
        y: DVector::zeros(m),
        z: e.clone(),
        tau: 1.0,
        kappa: 1.0,
    };

    let mut best: Option<ConicSolution> = None;
    let tol = settings.tol;
    let mut status = Status::MaxIters;
    let mut iterations = 0;
    let mut scaling: Option<Vec<BlockScaling>> = None;
    let mut mark = (0, f64::INFINITY);

    for iter in 0..=settings.max_iters {
        iterations = iter;
        let x = &it.x / it.tau;
        let ys = &it.y / it.tau;
        let z = &it.z / it.tau;
        let y = unscale_y(&ys);
        let res = residuals(problem, &x, &y, &z);
        let candidate = ConicSolution {
            status: Status::MaxIters,
            primal_objective: problem.c.dot(&x),
            dual_objective: problem.b.dot(&y),
            x,
            y,
            z,
            residuals: res,
            iterations: iter,
        };
        if res.primal <= tol && res.dual <= tol && res.gap <= tol {
            return Ok(ConicSolution {
                status: Status::Optimal,
                ..candidate
            });
        }
        if best.as_ref().is_none_or(|b| res.max() < b.residuals.max()) {
            best = Some(candidate);
        }
        if res.max() < 0.5 * mark.1 {
            mark = (iter, res.max());
        } else if mark.1 <= STALL_BAND * tol && iter - mark.0 >= STALL_ITERS {
            status = Status::NumericalError;
            break;
        }

        let byv = ws.b.dot(&it.y);
        if byv > 0.0 {
            let y_orig = unscale_y(&it.y);
            let dual_res = (problem.a.tr_mul(&y_orig) + &it.z).norm() / byv;
            if dual_res <= tol {
                let scale = 1.0 / problem.b.dot(&y_orig);
                return Ok(ConicSolution {
                    status: Status::Infeasible,
                    x: DVector::zeros(n),
                    y: y_orig * scale,
                    z: &it.z * scale,
                    primal_objective: f64::INFINITY,
                    dual_objective: f64::INFINITY,
                    residuals: res,
                    iterations: iter,
                });
            }
        }
        let cxv = ws.c.dot(&it.x);
        if cxv < 0.0 {
            let primal_res = (&problem.a * &it.x).norm() / -cxv;
            if primal_res <= tol {
                let scale = -1.0 / cxv;
                return Ok(ConicSolution {
                    status: Status::Unbounded,
                    x: &it.x * scale,
                    y: DVector::zeros(m0),
                    z: DVector::zeros(n),
                    primal_objective: f64::NEG_INFINITY,
                    dual_objective: f64::NEG_INFINITY,
                    residuals: res,
                    iterations: iter,
                });
            }
        }
        if iter == settings.max_iters {
            break;
        }

        let sc = match scaling.take().or_else(|| ws.scalings(&it.x, &it.z)) {
            Some(sc) => sc,
            None => {
                status = Status::NumericalError;
                break;
            }
        };
        match step(&ws, &mut it, nu, &e, &sc) {
            Ok(next) => scaling = Some(next),
            Err(()) => {
                status = Status::NumericalError;
                break;
            }
        }
    }

    let mut out = best.expect("at least one iterate evaluated");
    out.status = status;
    out.iterations = iterations;
    Ok(out)
}

/// One predictor–corrector step; returns the scaling at the new iterate.
fn step(ws: &Workspace, it: &mut Iterate, nu: f64, e: &DVector<f64>, sc: &[BlockScaling]) -> Result<Vec<BlockScaling>, ()> {
    let lambda = ws.lambda(sc);
    let mu = (it.x.dot(&it.z) + it.tau * it.kappa) / (nu + 1.0);

    let r_p = &ws.b * it.tau - &ws.a * &it.x;
    let r_d = &ws.c * it.tau - ws.a.tr_mul(&it.y) - &it.z;
    let r_g = it.kappa + ws.c.dot(&it.x) - ws.b.dot(&it.y);

    let mmat = ws.schur(sc);
    let factor = Factor::new(mmat.clone());
    let hc = ws.apply(sc, &ws.c, BlockScaling::apply_h);
    let hr_d = ws.apply(sc, &r_d, BlockScaling::apply_h);
    let rhs2 = &ws.a * &hc + &ws.b;
    let y2 = factor.solve(&mmat, &rhs2).ok_or(())?;
    let z2 = &ws.c - ws.a.tr_mul(&y2);
    let x2 = -ws.apply(sc, &z2, BlockScaling::apply_h);

    let solve_dir = |eta: f64, r_c: &DVector<f64>, r_tau: f64| -> Option<Direction> {
        let q = ws.jordan_solve(&lambda, r_c);
        let wtq = ws.apply(sc, &q, BlockScaling::apply_wt);
        let rhs1 = &r_p * eta - &ws.a * &wtq + &ws.a * &hr_d * eta;
        let y1 = factor.solve(&mmat, &rhs1)?;
        let z1 = &r_d * eta - ws.a.tr_mul(&y1);
        let x1 = &wtq - ws.apply(sc, &z1, BlockScaling::apply_h);
        let num = eta * r_g - ws.b.dot(&y1) + ws.c.dot(&x1) + r_tau / it.tau;
        let den = ws.b.dot(&y2) - ws.c.dot(&x2) + it.kappa / it.tau;
        if !(den.is_finite() && den != 0.0) {
            return None;
        }
        let dtau = num / den;
        let dkappa = (r_tau - it.kappa * dtau) / it.tau;
        Some(Direction {
            dx: x1 + &x2 * dtau,
            dy: y1 + &y2 * dtau,
            dz: z1 + &z2 * dtau,
            dtau,
            dkappa,
        })
    };

    let max_alpha = |d: &Direction, cap: f64| -> (f64, DVector<f64>, DVector<f64>) {
        let sdx = ws.apply(sc, &d.dx, BlockScaling::apply_winv_t);
        let sdz = ws.apply(sc, &d.dz, BlockScaling::apply_w);
        let mut alpha = ws.max_step(&lambda, &sdx, cap).min(ws.max_step(&lambda, &sdz, cap));
        if d.dtau < 0.0 {
            alpha = alpha.min(-it.tau / d.dtau);
        }
        if d.dkappa < 0.0 {
            alpha = alpha.min(-it.kappa / d.dkappa);
        }
        (alpha, sdx, sdz)
    };

    // Affine predictor.
    let r_c_aff = -ws.jordan(&lambda, &lambda);
    let aff = solve_dir(1.0, &r_c_aff, -it.tau * it.kappa).ok_or(())?;
    let (alpha_aff, sdx_aff, sdz_aff) = max_alpha(&aff, 1.0);
    let alpha_aff = alpha_aff.min(1.0);
    let sigma = (1.0 - alpha_aff).powi(3);

    // Combined corrector.
    let r_c = e * (sigma * mu) - ws.jordan(&lambda, &lambda) - ws.jordan(&sdx_aff, &sdz_aff);
    let r_tau = sigma * mu - it.tau * it.kappa - aff.dtau * aff.dkappa;
    let dir = solve_dir(1.0 - sigma, &r_c, r_tau).ok_or(())?;
    let (alpha_max, _, _) = max_alpha(&dir, 1.0 / STEP_FRACTION);
    let mut alpha = (STEP_FRACTION * alpha_max).min(1.0);
    if !alpha.is_finite() || alpha < MIN_STEP {
        return Err(());
    }

    loop {
        let x = &it.x + &dir.dx * alpha;
        let z = &it.z + &dir.dz * alpha;
        let tau = it.tau + dir.dtau * alpha;
        let kappa = it.kappa + dir.dkappa * alpha;
        let next = if tau > 0.0 && kappa > 0.0 { ws.scalings(&x, &z) } else { None };
        if let Some(next_sc) = next {
            it.x = x;
            it.z = z;
            it.y += &dir.dy * alpha;
            it.tau = tau;
            it.kappa = kappa;
            // Keep the homogeneous iterate well scaled.
            let s = it.tau.max(it.kappa);
            if !(1e-8..=1e8).contains(&s) {
                let f = 1.0 / s;
                it.x *= f;
                it.y *= f;
                it.z *= f;
                it.tau *= f;
                it.kappa *= f;
                return ws.scalings(&it.x, &it.z).ok_or(());
            }
            return Ok(next_sc);
        }
        alpha *= 0.8;
        if alpha < MIN_STEP {
            return Err(());
        }
    }
}
