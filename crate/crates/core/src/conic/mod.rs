//! Dense conic programming.
//!
//! Problems are held in primal standard form
//!
//! ```text
//!     minimize    cᵀx
//!     subject to  A x = b,   x ∈ K = K₁ × … × K_p
//! ```
//!
//! where every `Kᵢ` is a nonnegative orthant, a second-order cone
//! `{(t, u) : ‖u‖₂ ≤ t}` or a cone of positive semidefinite matrices stored
//! as `svec` (upper triangle, column-major, off-diagonals scaled by √2 so
//! that `svec(X)ᵀsvec(Y) = Tr(XY)`). The dual is
//! `maximize bᵀy  s.t.  Aᵀy + z = c, z ∈ K`.
//!
//! [`solve`] runs a homogeneous self-dual interior-point method with
//! Nesterov–Todd scaling and Mehrotra correction, forming the Schur
//! complement `A W Wᵀ Aᵀ` densely. That is cheap when the number of
//! equality rows is small, even if the PSD blocks are large.

mod cones;
mod dump;
mod embed;
mod ipm;

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cones::{smat, svec, svec_len};
pub use dump::{read_problem, write_problem};
pub use embed::{hermitian_embed, hermitian_from_embedded};
pub use ipm::solve;

#[derive(Debug, Error)]
pub enum ConicError {
    #[error("problem dimensions are inconsistent: {0}")]
    Dimension(String),
    #[error("tolerance {0} outside [1e-10, 1e-4]")]
    Tolerance(f64),
    #[error("matrix is not Hermitian (deviation {0:e})")]
    NotHermitian(f64),
    #[error("malformed problem dump at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One block of the product cone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cone {
    /// `d` nonnegative coordinates.
    NonNeg(usize),
    /// Lorentz cone of dimension `d` (head first).
    Soc(usize),
    /// Symmetric PSD matrices of the given side, `side (side + 1) / 2`
    /// coordinates.
    Psd(usize),
}

impl Cone {
    pub fn dim(self) -> usize {
        match self {
            Cone::NonNeg(d) | Cone::Soc(d) => d,
            Cone::Psd(s) => svec_len(s),
        }
    }

    /// Barrier degree contribution.
    pub fn degree(self) -> usize {
        match self {
            Cone::NonNeg(d) => d,
            Cone::Soc(_) => 1,
            Cone::Psd(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicProblem {
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub cones: Vec<Cone>,
    /// Named coordinate ranges of model variables, for reading results back.
    pub names: BTreeMap<String, Range<usize>>,
}

impl ConicProblem {
    pub fn new(c: DVector<f64>, a: DMatrix<f64>, b: DVector<f64>, cones: Vec<Cone>) -> Self {
        Self {
            c,
            a,
            b,
            cones,
            names: BTreeMap::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.c.len()
    }

    pub fn num_rows(&self) -> usize {
        self.b.len()
    }

    /// Start offset of every cone block.
    pub fn offsets(&self) -> Vec<usize> {
        self.cones
            .iter()
            .scan(0, |acc, k| {
                let start = *acc;
                *acc += k.dim();
                Some(start)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConicError> {
        let n = self.num_vars();
        let covered: usize = self.cones.iter().map(|k| k.dim()).sum();
        if covered != n {
            return Err(ConicError::Dimension(format!(
                "cones cover {covered} coordinates but c has {n}"
            )));
        }
        if self.a.ncols() != n || self.a.nrows() != self.b.len() {
            return Err(ConicError::Dimension(format!(
                "A is {}x{}, expected {}x{}",
                self.a.nrows(),
                self.a.ncols(),
                self.b.len(),
                n
            )));
        }
        if self.cones.iter().any(|k| k.dim() == 0) {
            return Err(ConicError::Dimension("empty cone block".into()));
        }
        for (name, r) in &self.names {
            if r.end > n {
                return Err(ConicError::Dimension(format!("variable {name} ends past {n}")));
            }
        }
        let finite = self.c.iter().chain(self.b.iter()).chain(self.a.iter());
        if finite.into_iter().any(|v| !v.is_finite()) {
            return Err(ConicError::Dimension("non-finite problem data".into()));
        }
        Ok(())
    }

    pub fn var(&self, name: &str) -> Option<Range<usize>> {
        self.names.get(name).cloned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Optimal,
    /// Primal infeasible; `y` holds a Farkas certificate
    /// (`bᵀy = 1`, `-Aᵀy ∈ K`).
    Infeasible,
    /// Dual infeasible; `x` holds an improving ray (`Ax = 0`, `cᵀx = -1`).
    Unbounded,
    MaxIters,
    /// Scaling or factorization broke down; the best iterate is returned.
    NumericalError,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Residuals {
    /// `‖Ax − b‖₂ / (1 + ‖b‖₂)`
    pub primal: f64,
    /// `‖Aᵀy + z − c‖₂ / (1 + ‖c‖₂)`
    pub dual: f64,
    /// `|cᵀx − bᵀy| / (1 + |cᵀx|)`
    pub gap: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.gap)
    }
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub status: Status,
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DVector<f64>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub residuals: Residuals,
    pub iterations: usize,
}

impl ConicSolution {
    /// Primal objective value `cᵀx`.
    pub fn objective(&self) -> f64 {
        self.primal_objective
    }

    pub fn var<'a>(&'a self, problem: &ConicProblem, name: &str) -> Option<&'a [f64]> {
        problem.var(name).map(|r| &self.x.as_slice()[r])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iters: 100,
        }
    }
}

/// Recomputes residuals of an arbitrary primal–dual triple.
pub fn residuals(problem: &ConicProblem, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> Residuals {
    let pobj = problem.c.dot(x);
    let dobj = problem.b.dot(y);
    Residuals {
        primal: (&problem.a * x - &problem.b).norm() / (1.0 + problem.b.norm()),
        dual: (problem.a.tr_mul(y) + z - &problem.c).norm() / (1.0 + problem.c.norm()),
        gap: (pobj - dobj).abs() / (1.0 + pobj.abs()),
    }
}

/// Smallest "eigenvalue" of `x` with respect to each cone block, i.e. its
/// distance to the boundary (negative when outside).
pub fn cone_margin(cones: &[Cone], x: &DVector<f64>) -> f64 {
    let mut offset = 0;
    let mut margin = f64::INFINITY;
    for &k in cones {
        let seg = &x.as_slice()[offset..offset + k.dim()];
        let m = match k {
            Cone::NonNeg(_) => seg.iter().copied().fold(f64::INFINITY, f64::min),
            Cone::Soc(_) => seg[0] - seg[1..].iter().map(|v| v * v).sum::<f64>().sqrt(),
            Cone::Psd(s) => {
                let m = smat(seg, s);
                m.symmetric_eigen().eigenvalues.min()
            }
        };
        margin = margin.min(m);
        offset += k.dim();
    }
    margin
}
