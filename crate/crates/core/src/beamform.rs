//! Reflection design for a fixed grouping.
//!
//! The blocklength constraint of every user is written as
//!
//! ```text
//! R(m, μ) = m ln(1 + μ) − D ln 2 − Q⁻¹(ε) √(m (1 − (1 + μ)⁻²)) ≥ 0
//! ```
//!
//! with `μ_k` a lower bound on the SNR of user `k`. The surface enters
//! through the lifted matrix `V = v̄ v̄ᴴ`, relaxed to `V ⪰ 0` with unit
//! diagonal. Each SCA step linearises `R` around the current point, adds a
//! trust region on `[m, μ]` and solves the resulting conic program.

use std::f64::consts::LN_2;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{self, ChannelError, ChannelRealization};
use crate::conic::{self, Cone, ConicError, ConicProblem, SolverSettings, Status};
use crate::fbl::{self, FblError};
use crate::grouping::Grouping;

#[derive(Debug, Error)]
pub enum BeamformError {
    #[error(transparent)]
    Fbl(#[from] FblError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error("grouping covers {grouping} users but the realization has {realization}")]
    UserCount { grouping: usize, realization: usize },
    #[error("expansion point is not interior: {0}")]
    Domain(String),
}

/// Everything fixed during one reflection-design solve.
#[derive(Debug, Clone, Copy)]
pub struct P2Context<'a> {
    pub realization: &'a ChannelRealization,
    pub grouping: &'a Grouping,
    pub eps_max: f64,
    pub tx_power_w: f64,
    pub noise_power_w: f64,
}

impl P2Context<'_> {
    fn snr_scale(&self) -> f64 {
        self.tx_power_w / self.noise_power_w
    }

    fn check(&self) -> Result<(), BeamformError> {
        if self.grouping.num_users() != self.realization.num_users() {
            return Err(BeamformError::UserCount {
                grouping: self.grouping.num_users(),
                realization: self.realization.num_users(),
            });
        }
        Ok(())
    }

    /// Exact SNRs under a unit-modulus `v`.
    pub fn snrs(&self, v: &[Complex64]) -> Result<Vec<f64>, ChannelError> {
        channel::effective_snrs(self.realization, v, self.tx_power_w, self.noise_power_w)
    }

    /// Real-valued total latency under `v`; infinite when undefined.
    pub fn latency(&self, v: &[Complex64]) -> f64 {
        self.snrs(v)
            .ok()
            .and_then(|s| fbl::group_total_latency(self.grouping, &s, self.eps_max).ok())
            .map_or(f64::INFINITY, |(_, total)| total)
    }

    /// `μ`-side of the coupling constraint: `(P/σ²)(Tr(R_k V) + |h_k|²)`.
    fn lifted_snr(&self, v: &DMatrix<Complex64>, k: usize) -> f64 {
        let r = &self.realization.lifted[k];
        let tr: Complex64 = (r * v).trace();
        self.snr_scale() * (tr.re + self.realization.h[k].norm_sqr())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaControls {
    pub mu_floor: f64,
    /// Initial trust radius; `None` uses `0.5 ‖[m⁰, μ⁰]‖₂`.
    pub initial_radius: Option<f64>,
    pub shrink: f64,
    /// `Γ_min / Γ⁰`
    pub min_radius_ratio: f64,
    /// Minimum decrease of `Σ m_i` (symbols) for a step to be accepted.
    pub tol_improve: f64,
    pub randomization_trials: usize,
    pub max_iters: usize,
    /// Relative improvement below which an accepted step counts as stalled.
    pub stall_rel: f64,
    /// Consecutive stalled accepts that end the loop.
    pub stall_window: usize,
    pub randomize_each_iteration: bool,
    pub solver: SolverSettings,
    /// Seed of the randomization stream.
    pub seed: u64,
}

impl Default for ScaControls {
    fn default() -> Self {
        Self {
            mu_floor: 1e-6,
            initial_radius: None,
            shrink: 0.5,
            min_radius_ratio: 1e-4,
            tol_improve: 1e-3,
            randomization_trials: 1000,
            max_iters: 100,
            stall_rel: 1e-4,
            stall_window: 3,
            randomize_each_iteration: false,
            solver: SolverSettings::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaState {
    /// Per-group blocklengths.
    pub m: Vec<f64>,
    /// Per-user SNR lower bounds.
    pub mu: Vec<f64>,
    /// Hermitian `(N+1)×(N+1)`, PSD with unit diagonal.
    pub v: DMatrix<Complex64>,
    pub gamma: f64,
    pub gamma0: f64,
    pub iteration: usize,
    /// Set when some initial SNR had to be lifted to the floor.
    pub degenerate: bool,
}

impl ScaState {
    pub fn objective(&self) -> f64 {
        self.m.iter().sum()
    }
}

/// Lifts `v` to `v̄ v̄ᴴ` with `v̄ = [v; 1]`.
pub fn lift(v: &[Complex64]) -> DMatrix<Complex64> {
    let mut vbar: Vec<Complex64> = v.to_vec();
    vbar.push(Complex64::new(1.0, 0.0));
    let col = DVector::from_vec(vbar);
    &col * col.adjoint()
}

pub fn initialize(ctx: &P2Context, controls: &ScaControls) -> Result<ScaState, BeamformError> {
    ctx.check()?;
    let real = ctx.realization;
    let n = real.num_elements();
    let v0: Vec<Complex64> = if n == 0 {
        Vec::new()
    } else {
        let strongest = (0..real.num_users())
            .map(|k| (k, real.phi[k].iter().map(|p| p.norm()).sum::<f64>()))
            .filter(|(_, s)| *s > 0.0)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(k, _)| k);
        match strongest {
            Some(k) => channel::align_to_user(real, k),
            None => vec![Complex64::new(1.0, 0.0); n],
        }
    };
    let mut degenerate = false;
    let mu: Vec<f64> = ctx
        .snrs(&v0)?
        .into_iter()
        .map(|g| {
            if g < controls.mu_floor {
                degenerate = true;
                controls.mu_floor
            } else {
                g
            }
        })
        .collect();
    let m = refined_blocklengths(ctx, &mu)?;
    let norm = m.iter().chain(&mu).map(|x| x * x).sum::<f64>().sqrt();
    let gamma0 = controls.initial_radius.unwrap_or(0.5 * norm);
    Ok(ScaState {
        m,
        mu,
        v: lift(&v0),
        gamma: gamma0,
        gamma0,
        iteration: 0,
        degenerate,
    })
}

/// `m(ε, min_{k∈K_i} μ_k, D_i)` for every group, floored at one symbol.
fn refined_blocklengths(ctx: &P2Context, mu: &[f64]) -> Result<Vec<f64>, BeamformError> {
    let (per_group, _) = fbl::group_total_latency(ctx.grouping, mu, ctx.eps_max)?;
    Ok(per_group.into_iter().map(|m| m.max(1.0)).collect())
}

/// `R(m, μ)` for a `payload_bits` codeword.
pub fn r_function(m: f64, mu: f64, payload_bits: u64, eps: f64) -> Result<f64, FblError> {
    let qinv = fbl::q_inverse(eps)?;
    let u = 1.0 + mu;
    Ok(m * mu.ln_1p() - LN_2 * payload_bits as f64 - qinv * (m * (1.0 - 1.0 / (u * u))).sqrt())
}

/// First-order expansion `R̂ = constant + d_m (m − m⁰) + d_μ (μ − μ⁰)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaylorCoefficients {
    pub constant: f64,
    pub d_m: f64,
    pub d_mu: f64,
}

impl TaylorCoefficients {
    pub fn eval(&self, m0: f64, mu0: f64, m: f64, mu: f64) -> f64 {
        self.constant + self.d_m * (m - m0) + self.d_mu * (mu - mu0)
    }
}

pub fn taylor_lower_bound(m: f64, mu: f64, payload_bits: u64, eps: f64) -> Result<TaylorCoefficients, BeamformError> {
    if !(m > 0.0 && mu > 0.0 && m.is_finite() && mu.is_finite()) {
        return Err(BeamformError::Domain(format!("m = {m}, μ = {mu}")));
    }
    let qinv = fbl::q_inverse(eps)?;
    let u = 1.0 + mu;
    let root = (1.0 - 1.0 / (u * u)).sqrt();
    Ok(TaylorCoefficients {
        constant: r_function(m, mu, payload_bits, eps)?,
        d_m: mu.ln_1p() - qinv * root / (2.0 * m.sqrt()),
        d_mu: m / u - qinv * m.sqrt() / ((u * u - 1.0).sqrt() * u * u),
    })
}

/// Coordinate layout of an assembled convex subproblem.
#[derive(Debug, Clone, PartialEq)]
pub struct P23Layout {
    pub groups: usize,
    pub users: usize,
    pub elements: usize,
    /// `Σ m⁰`, to add to the conic objective.
    pub objective_offset: f64,
}

impl P23Layout {
    fn soc_dim(&self) -> usize {
        1 + self.groups + self.users
    }

    fn nonneg_dim(&self) -> usize {
        3 * self.users + self.groups
    }

    fn psd_side(&self) -> usize {
        2 * (self.elements + 1)
    }

    fn psd_offset(&self) -> usize {
        self.soc_dim() + self.nonneg_dim()
    }
}

/// Builds the convex subproblem around `state`.
///
/// Cone blocks: one SOC `(Γ, m − m⁰, μ − μ⁰)`, nonnegative slacks for the
/// coupling, linearised blocklength and floor constraints, and the real
/// embedding of `V`.
pub fn assemble_p23(
    ctx: &P2Context,
    state: &ScaState,
    controls: &ScaControls,
) -> Result<(ConicProblem, P23Layout), BeamformError> {
    ctx.check()?;
    let g = ctx.grouping.len();
    let k_users = ctx.grouping.num_users();
    let n = ctx.realization.num_elements();
    let layout = P23Layout {
        groups: g,
        users: k_users,
        elements: n,
        objective_offset: state.objective(),
    };
    let side = layout.psd_side();
    let nvars = layout.psd_offset() + conic::svec_len(side);
    let rows = 1 + 3 * k_users + g + (n + 1);
    let mut a = DMatrix::zeros(rows, nvars);
    let mut b = DVector::zeros(rows);
    let mut c = DVector::zeros(nvars);

    let dm = |i: usize| 1 + i;
    let dmu = |k: usize| 1 + g + k;
    let s_couple = |k: usize| layout.soc_dim() + k;
    let s_taylor = |k: usize| layout.soc_dim() + k_users + k;
    let s_m = |i: usize| layout.soc_dim() + 2 * k_users + i;
    let s_mu = |k: usize| layout.soc_dim() + 2 * k_users + g + k;
    let psd = layout.psd_offset();

    for i in 0..g {
        c[dm(i)] = 1.0;
    }
    let mut row = 0;
    a[(row, 0)] = 1.0;
    b[row] = state.gamma;
    row += 1;

    // ½ Tr(embed(R̃_k) X) − Δμ_k − s_k = μ⁰_k − |h̃_k|²
    let scale = ctx.snr_scale();
    for k in 0..k_users {
        let rk = ctx.realization.lifted[k].map(|z| z * scale);
        let coeffs = conic::svec(&conic::hermitian_embed(&rk)?);
        for (j, v) in coeffs.iter().enumerate() {
            a[(row, psd + j)] = 0.5 * v;
        }
        a[(row, dmu(k))] = -1.0;
        a[(row, s_couple(k))] = -1.0;
        b[row] = state.mu[k] - scale * ctx.realization.h[k].norm_sqr();
        row += 1;
    }

    // d_m Δm_i + d_μ Δμ_k − s = −R(m⁰, μ⁰)
    for (i, members) in ctx.grouping.groups().iter().enumerate() {
        for &k in members {
            let t = taylor_lower_bound(state.m[i], state.mu[k], ctx.grouping.payload(i), ctx.eps_max)?;
            a[(row, dm(i))] = t.d_m;
            a[(row, dmu(k))] = t.d_mu;
            a[(row, s_taylor(k))] = -1.0;
            b[row] = -t.constant;
            row += 1;
        }
    }

    for i in 0..g {
        a[(row, dm(i))] = 1.0;
        a[(row, s_m(i))] = -1.0;
        b[row] = 1.0 - state.m[i];
        row += 1;
    }
    for k in 0..k_users {
        a[(row, dmu(k))] = 1.0;
        a[(row, s_mu(k))] = -1.0;
        b[row] = controls.mu_floor - state.mu[k];
        row += 1;
    }

    // (X_nn + X_{n'n'}) / 2 = 1
    for d in 0..=n {
        a[(row, psd + conic_diag(d))] = 0.5;
        a[(row, psd + conic_diag(d + n + 1))] = 0.5;
        b[row] = 1.0;
        row += 1;
    }
    debug_assert_eq!(row, rows);

    let cones = vec![
        Cone::Soc(layout.soc_dim()),
        Cone::NonNeg(layout.nonneg_dim()),
        Cone::Psd(side),
    ];
    let mut problem = ConicProblem::new(c, a, b, cones);
    problem.names.insert("trust".into(), 0..1);
    problem.names.insert("dm".into(), 1..1 + g);
    problem.names.insert("dmu".into(), 1 + g..1 + g + k_users);
    problem.names.insert("slack".into(), layout.soc_dim()..psd);
    problem.names.insert("V".into(), psd..nvars);
    Ok((problem, layout))
}

fn conic_diag(j: usize) -> usize {
    j * (j + 1) / 2 + j
}

/// Nearest PSD matrix with unit diagonal, by eigenvalue clipping followed by
/// diagonal rescaling.
fn repair_lifted(v: &DMatrix<Complex64>) -> Option<DMatrix<Complex64>> {
    let n = v.nrows();
    let herm = (v + v.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = herm.symmetric_eigen();
    let mut psd = DMatrix::<Complex64>::zeros(n, n);
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l > 0.0 {
            let u = eig.eigenvectors.column(i);
            psd += (u * u.adjoint()) * Complex64::new(l, 0.0);
        }
    }
    let d: Vec<f64> = (0..n).map(|i| psd[(i, i)].re).collect();
    if d.iter().any(|&x| !(x > 1e-12)) {
        return None;
    }
    let out = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            Complex64::new(1.0, 0.0)
        } else {
            psd[(i, j)] / (d[i] * d[j]).sqrt()
        }
    });
    Some(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaTraceEntry {
    pub iteration: usize,
    pub gamma: f64,
    pub accepted: bool,
    /// `Σ m_i` of the conic solution, when one was obtained.
    pub relaxed_objective: Option<f64>,
    /// `Σ m(ε, min μ*)` after refinement.
    pub refined_objective: Option<f64>,
    pub solver_status: Option<Status>,
}

#[derive(Debug, Clone)]
pub struct ScaStep {
    pub state: ScaState,
    pub accepted: bool,
    pub trace: ScaTraceEntry,
}

fn usable(status: Status, residual: f64, tol: f64) -> bool {
    match status {
        Status::Optimal => true,
        Status::MaxIters | Status::NumericalError => residual <= 100.0 * tol,
        Status::Infeasible | Status::Unbounded => false,
    }
}

pub fn sca_step(ctx: &P2Context, state: &ScaState, controls: &ScaControls) -> Result<ScaStep, BeamformError> {
    let (problem, layout) = assemble_p23(ctx, state, controls)?;
    let sol = conic::solve(&problem, &controls.solver)?;
    let iteration = state.iteration + 1;
    let reject = |status: Option<Status>, relaxed: Option<f64>, refined: Option<f64>, step: Option<f64>| {
        let mut next = state.clone();
        next.gamma *= controls.shrink;
        if let Some(step) = step {
            // Radii that still contain the rejected optimum reproduce it.
            let gamma_min = controls.min_radius_ratio * state.gamma0;
            while next.gamma >= step && next.gamma >= gamma_min {
                next.gamma *= controls.shrink;
            }
        }
        next.iteration = iteration;
        ScaStep {
            state: next,
            accepted: false,
            trace: ScaTraceEntry {
                iteration,
                gamma: state.gamma,
                accepted: false,
                relaxed_objective: relaxed,
                refined_objective: refined,
                solver_status: status,
            },
        }
    };
    if !usable(sol.status, sol.residuals.max(), controls.solver.tol) {
        return Ok(reject(Some(sol.status), None, None, None));
    }
    let relaxed = sol.objective() + layout.objective_offset;
    let x = sol.var(&problem, "V").expect("V block");
    let embedded = conic::smat(x, layout.psd_side());
    let Some(v) = repair_lifted(&conic::hermitian_from_embedded(&embedded)) else {
        return Ok(reject(Some(sol.status), Some(relaxed), None, None));
    };
    let dmu = sol.var(&problem, "dmu").expect("dmu block");
    let dm = sol.var(&problem, "dm").expect("dm block");
    let step = dm.iter().chain(dmu).map(|d| d * d).sum::<f64>().sqrt();
    let mu: Vec<f64> = (0..layout.users)
        .map(|k| {
            let proposed = state.mu[k] + dmu[k];
            proposed.min(ctx.lifted_snr(&v, k)).max(controls.mu_floor)
        })
        .collect();
    let m_cand = refined_blocklengths(ctx, &mu)?;
    let refined: f64 = m_cand.iter().sum();
    if refined < state.objective() - controls.tol_improve {
        let next = ScaState {
            m: m_cand,
            mu,
            v,
            gamma: state.gamma0,
            gamma0: state.gamma0,
            iteration,
            degenerate: state.degenerate,
        };
        Ok(ScaStep {
            state: next,
            accepted: true,
            trace: ScaTraceEntry {
                iteration,
                gamma: state.gamma,
                accepted: true,
                relaxed_objective: Some(relaxed),
                refined_objective: Some(refined),
                solver_status: Some(sol.status),
            },
        })
    } else {
        Ok(reject(Some(sol.status), Some(relaxed), Some(refined), Some(step)))
    }
}

/// Phase-only vector `v_n = exp(j arg(r_n / r_N))` from a lifted sample.
fn phases_from(r: &[Complex64]) -> Vec<Complex64> {
    let n = r.len() - 1;
    let reference = if r[n].norm() > 0.0 { r[n].arg() } else { 0.0 };
    r[..n]
        .iter()
        .map(|z| {
            let phase = if z.norm() > 0.0 { z.arg() } else { 0.0 };
            Complex64::from_polar(1.0, phase - reference)
        })
        .collect()
}

/// Rank-one recovery from a relaxed `V`.
///
/// The principal eigenvector is tried first, then `trials` draws of
/// `r ~ CN(0, V)`; the first candidate with the lowest latency wins.
pub fn gaussian_randomization(
    v: &DMatrix<Complex64>,
    ctx: &P2Context,
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Complex64>, f64) {
    let dim = v.nrows();
    if dim <= 1 {
        let empty = Vec::new();
        let lat = ctx.latency(&empty);
        return (empty, lat);
    }
    let herm = (v + v.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = herm.symmetric_eigen();
    let top = (0..dim)
        .max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]))
        .expect("nonempty");
    let principal: Vec<Complex64> = eig.eigenvectors.column(top).iter().copied().collect();
    let mut best_v = phases_from(&principal);
    let mut best = ctx.latency(&best_v);

    // V = L Lᴴ with L = U Λ^{1/2}
    let lam_max = eig.eigenvalues[top].max(0.0);
    let mut l = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = if lam > 1e-12 * lam_max { lam.sqrt() } else { 0.0 };
        l.column_mut(j).scale_mut(s);
    }
    let mut xi = DVector::<Complex64>::zeros(dim);
    for _ in 0..trials {
        for e in xi.iter_mut() {
            *e = channel::complex_normal(rng);
        }
        let r = &l * &xi;
        let cand = phases_from(r.as_slice());
        let lat = ctx.latency(&cand);
        if lat < best {
            best = lat;
            best_v = cand;
        }
    }
    (best_v, best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamformResult {
    pub v: Vec<Complex64>,
    /// Integer blocklength of every group.
    pub m: Vec<u64>,
    pub snrs: Vec<f64>,
    pub pep: Vec<f64>,
    pub total_latency: u64,
    /// `Σ m_i` of the SCA iterate at convergence (real valued).
    pub relaxed_latency: f64,
    /// Real-valued latency at the starting point.
    pub initial_latency: f64,
    pub sca_iterations: usize,
    pub accepted_steps: usize,
    pub trace: Vec<ScaTraceEntry>,
}

/// Integer blocklengths under exact SNRs, raised until every member meets
/// `ε_max`.
pub fn integer_blocklengths(
    grouping: &Grouping,
    snrs: &[f64],
    eps: f64,
) -> Result<(Vec<u64>, Vec<f64>), FblError> {
    let (real_m, _) = fbl::group_total_latency(grouping, snrs, eps)?;
    let mut m: Vec<u64> = real_m.iter().map(|x| x.ceil().max(1.0) as u64).collect();
    let mut pep = vec![0.0; snrs.len()];
    for (i, members) in grouping.groups().iter().enumerate() {
        loop {
            let mut ok = true;
            for &k in members {
                pep[k] = fbl::pep(m[i] as f64, snrs[k], grouping.payload(i))?;
                ok &= pep[k] <= eps;
            }
            if ok {
                break;
            }
            m[i] += 1;
        }
    }
    Ok((m, pep))
}

pub fn solve_p2(ctx: &P2Context, controls: &ScaControls) -> Result<BeamformResult, BeamformError> {
    ctx.check()?;
    let n = ctx.realization.num_elements();
    let mut trace = Vec::new();
    let mut accepted_steps = 0;
    let mut state = initialize(ctx, controls)?;
    let initial_latency = state.objective();

    let v_init: Vec<Complex64> = (0..n).map(|i| state.v[(i, n)]).collect();
    let mut best_v = v_init.clone();
    let mut best_lat = ctx.latency(&best_v);
    let mut rng = ChaCha8Rng::seed_from_u64(controls.seed);

    if n > 0 {
        let gamma_min = controls.min_radius_ratio * state.gamma0;
        let mut stalled = 0;
        while state.iteration < controls.max_iters && state.gamma >= gamma_min {
            let before = state.objective();
            let step = sca_step(ctx, &state, controls)?;
            trace.push(step.trace);
            state = step.state;
            if step.accepted {
                accepted_steps += 1;
                let rel = (before - state.objective()) / before;
                stalled = if rel < controls.stall_rel { stalled + 1 } else { 0 };
                if controls.randomize_each_iteration {
                    let (v, lat) = gaussian_randomization(&state.v, ctx, controls.randomization_trials, &mut rng);
                    if lat < best_lat {
                        best_lat = lat;
                        best_v = v;
                    }
                }
                if stalled >= controls.stall_window {
                    break;
                }
            }
        }
        if !controls.randomize_each_iteration || accepted_steps == 0 {
            let (v, lat) = gaussian_randomization(&state.v, ctx, controls.randomization_trials, &mut rng);
            if lat < best_lat {
                best_lat = lat;
                best_v = v;
            }
        }
    }
    let _ = best_lat;

    let mut snrs = ctx.snrs(&best_v)?;
    let (mut m, mut pep) = integer_blocklengths(ctx.grouping, &snrs, ctx.eps_max)?;
    if best_v != v_init {
        let snrs0 = ctx.snrs(&v_init)?;
        let (m0, pep0) = integer_blocklengths(ctx.grouping, &snrs0, ctx.eps_max)?;
        if m0.iter().sum::<u64>() < m.iter().sum::<u64>() {
            (best_v, snrs, m, pep) = (v_init, snrs0, m0, pep0);
        }
    }
    Ok(BeamformResult {
        v: best_v,
        total_latency: m.iter().sum(),
        m,
        snrs,
        pep,
        relaxed_latency: state.objective(),
        initial_latency,
        sca_iterations: state.iteration,
        accepted_steps,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_realization, Scenario};
    use rand::Rng;

    fn scenario(users: usize, elements: usize) -> Scenario {
        Scenario {
            users,
            elements,
            payload_bits: vec![256; users],
            ..Scenario::default()
        }
    }

    fn ctx<'a>(s: &Scenario, real: &'a ChannelRealization, g: &'a Grouping) -> P2Context<'a> {
        P2Context {
            realization: real,
            grouping: g,
            eps_max: s.eps_max,
            tx_power_w: s.tx_power_w,
            noise_power_w: s.noise_power_w,
        }
    }

    #[test]
    fn taylor_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let m = 20.0 + 500.0 * rng.random::<f64>();
            let mu = 0.05 + 50.0 * rng.random::<f64>();
            let eps = 10f64.powf(-1.0 - 8.0 * rng.random::<f64>());
            let d = 256;
            let t = taylor_lower_bound(m, mu, d, eps).unwrap();
            let hm = 1e-5 * m;
            let hmu = 1e-5 * mu;
            let fd_m = (r_function(m + hm, mu, d, eps).unwrap() - r_function(m - hm, mu, d, eps).unwrap()) / (2.0 * hm);
            let fd_mu = (r_function(m, mu + hmu, d, eps).unwrap() - r_function(m, mu - hmu, d, eps).unwrap()) / (2.0 * hmu);
            assert!((t.d_m - fd_m).abs() <= 1e-5 * fd_m.abs().max(1e-12), "{} {}", t.d_m, fd_m);
            assert!((t.d_mu - fd_mu).abs() <= 1e-5 * fd_mu.abs().max(1e-12), "{} {}", t.d_mu, fd_mu);
            assert_eq!(t.eval(m, mu, m, mu), t.constant);
        }
    }

    #[test]
    fn taylor_rejects_boundary() {
        assert!(taylor_lower_bound(10.0, 0.0, 64, 1e-5).is_err());
        assert!(taylor_lower_bound(0.0, 1.0, 64, 1e-5).is_err());
    }

    #[test]
    fn initial_point_is_feasible() {
        let s = scenario(4, 6);
        let real = generate_realization(&s, 3).unwrap();
        let g = Grouping::new(vec![vec![0, 1], vec![2, 3]], &s.payload_bits).unwrap();
        let c = ctx(&s, &real, &g);
        let st = initialize(&c, &ScaControls::default()).unwrap();
        for (i, members) in g.groups().iter().enumerate() {
            for &k in members {
                let r = r_function(st.m[i], st.mu[k], g.payload(i), s.eps_max).unwrap();
                assert!(r >= -1e-9 * st.m[i], "R = {r}");
            }
        }
        for i in 0..=6 {
            assert!((st.v[(i, i)].re - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_element_single_user_initial_snr_is_optimal() {
        let s = scenario(1, 1);
        let real = generate_realization(&s, 0).unwrap();
        let g = Grouping::single(&s.payload_bits);
        let c = ctx(&s, &real, &g);
        let st = initialize(&c, &ScaControls::default()).unwrap();
        let bound = channel::aligned_snr_bound(&real, 0, s.tx_power_w, s.noise_power_w);
        assert!((st.mu[0] / bound - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_surface_reduces_to_blocklength() {
        let s = scenario(3, 0);
        let real = generate_realization(&s, 1).unwrap();
        let g = Grouping::new(vec![vec![0, 2], vec![1]], &s.payload_bits).unwrap();
        let c = ctx(&s, &real, &g);
        let st = initialize(&c, &ScaControls::default()).unwrap();
        assert_eq!(st.v.nrows(), 1);
        let res = solve_p2(&c, &ScaControls::default()).unwrap();
        assert!(res.v.is_empty());
        let snrs = c.snrs(&[]).unwrap();
        let (per, _) = fbl::group_total_latency(&g, &snrs, s.eps_max).unwrap();
        let expect: u64 = per.iter().map(|m| m.ceil() as u64).sum();
        assert_eq!(res.total_latency, expect);
    }

    #[test]
    fn assembly_dimensions_and_anchor() {
        let s = scenario(3, 2);
        let real = generate_realization(&s, 4).unwrap();
        let g = Grouping::new(vec![vec![0, 1], vec![2]], &s.payload_bits).unwrap();
        let c = ctx(&s, &real, &g);
        let controls = ScaControls::default();
        let st = initialize(&c, &controls).unwrap();
        let (p, layout) = assemble_p23(&c, &st, &controls).unwrap();
        assert!(p.validate().is_ok());
        assert_eq!(
            p.cones,
            vec![Cone::Soc(1 + 2 + 3), Cone::NonNeg(3 * 3 + 2), Cone::Psd(6)]
        );
        assert_eq!(p.num_rows(), 1 + 3 * 3 + 2 + 3);
        // The anchor point satisfies every equality.
        let mut x = DVector::zeros(p.num_vars());
        x[0] = st.gamma;
        let off = layout.psd_offset();
        let emb = conic::hermitian_embed(&st.v).unwrap();
        for (j, v) in conic::svec(&emb).into_iter().enumerate() {
            x[off + j] = v;
        }
        // Slacks at the anchor.
        let soc = layout.soc_dim();
        for k in 0..3 {
            x[soc + k] = c.lifted_snr(&st.v, k) - st.mu[k];
            x[soc + 2 * 3 + 2 + k] = st.mu[k] - controls.mu_floor;
        }
        for (i, members) in g.groups().iter().enumerate() {
            for &k in members {
                x[soc + 3 + k] = r_function(st.m[i], st.mu[k], g.payload(i), s.eps_max).unwrap();
            }
            x[soc + 2 * 3 + i] = st.m[i] - 1.0;
        }
        let res = (&p.a * &x - &p.b).amax();
        assert!(res < 1e-6, "anchor residual {res}");
        assert!(conic::cone_margin(&p.cones, &x) > -1e-9);
    }

    #[test]
    fn tiny_trust_region_stays_at_anchor() {
        let s = scenario(2, 3);
        let real = generate_realization(&s, 2).unwrap();
        let g = Grouping::single(&s.payload_bits);
        let c = ctx(&s, &real, &g);
        let controls = ScaControls::default();
        let mut st = initialize(&c, &controls).unwrap();
        st.gamma = 1e-6;
        let (p, _) = assemble_p23(&c, &st, &controls).unwrap();
        let sol = conic::solve(&p, &controls.solver).unwrap();
        let dm = sol.var(&p, "dm").unwrap();
        let dmu = sol.var(&p, "dmu").unwrap();
        let step = dm.iter().chain(dmu).map(|x| x * x).sum::<f64>().sqrt();
        assert!(step <= 1e-6 * (1.0 + 1e-6));
    }

    #[test]
    fn sca_decreases_latency_and_meets_reliability() {
        let s = scenario(3, 8);
        let real = generate_realization(&s, 5).unwrap();
        let g = Grouping::new(vec![vec![0, 1, 2]], &s.payload_bits).unwrap();
        let c = ctx(&s, &real, &g);
        let controls = ScaControls {
            randomization_trials: 200,
            ..ScaControls::default()
        };
        let res = solve_p2(&c, &controls).unwrap();
        let mut last = res.initial_latency;
        for t in res.trace.iter().filter(|t| t.accepted) {
            let r = t.refined_objective.unwrap();
            assert!(r < last);
            last = r;
        }
        assert!(res.relaxed_latency <= res.initial_latency);
        channel::check_unit_modulus(&res.v, 8).unwrap();
        for k in 0..3 {
            assert!(res.pep[k] <= s.eps_max);
        }
        assert!((res.total_latency as f64) <= res.initial_latency.ceil() + 1.0);
    }

    #[test]
    fn randomization_recovers_rank_one() {
        let s = scenario(2, 4);
        let real = generate_realization(&s, 6).unwrap();
        let g = Grouping::singletons(&s.payload_bits);
        let c = ctx(&s, &real, &g);
        let v = channel::align_to_user(&real, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (got, lat) = gaussian_randomization(&lift(&v), &c, 10, &mut rng);
        for (a, b) in got.iter().zip(&v) {
            assert!((a - b).norm() < 1e-9, "{a} {b}");
        }
        assert!((lat - c.latency(&v)).abs() < 1e-9);
    }

    #[test]
    fn randomization_is_monotone_in_trials() {
        let s = scenario(3, 5);
        let real = generate_realization(&s, 7).unwrap();
        let g = Grouping::single(&s.payload_bits);
        let c = ctx(&s, &real, &g);
        let v = DMatrix::<Complex64>::identity(6, 6);
        let mut prev = f64::INFINITY;
        for trials in [1, 5, 25, 125] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let (_, lat) = gaussian_randomization(&v, &c, trials, &mut rng);
            assert!(lat <= prev);
            prev = lat;
        }
    }

    #[test]
    fn latency_invariant_under_global_phase_of_lifted_vector() {
        let s = scenario(3, 6);
        let real = generate_realization(&s, 9).unwrap();
        let g = Grouping::new(vec![vec![0], vec![1, 2]], &s.payload_bits).unwrap();
        let c = ctx(&s, &real, &g);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let r: Vec<Complex64> = (0..7).map(|_| channel::complex_normal(&mut rng)).collect();
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            let rot: Vec<Complex64> = r.iter().map(|z| z * Complex64::from_polar(1.0, theta)).collect();
            let a = c.latency(&phases_from(&r));
            let b = c.latency(&phases_from(&rot));
            assert!((a - b).abs() <= 1e-9 * a);
        }
    }
}
