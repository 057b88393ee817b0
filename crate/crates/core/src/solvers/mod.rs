//! Dense LP/QP kernels and discrete-time matrix-equation solvers.

mod lp;
mod matrix_eq;
mod qp;
mod simplex;

pub use lp::{solve_lp, solve_lp_with, LpEngine, LpProblem, SparseRow};
pub use matrix_eq::{
    dare_residual, solve_dare, solve_dare_with, solve_discrete_lyapunov, solve_discrete_lyapunov_with, spectral_radius,
    DareSolution,
};
pub use qp::{solve_qp, solve_qp_with, QpProblem};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("dimension mismatch in {0}")]
    Dimension(&'static str),
    #[error("matrix is not symmetric positive semidefinite")]
    NotPsd,
    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),
    #[error("closed-loop matrix is not Schur stable (spectral radius {0})")]
    Unstable(f64),
    #[error("singular system in {0}")]
    Singular(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

/// Outcome of an LP or QP solve. `solution` is present iff `status == Optimal`,
/// except that `best_iterate` keeps the last ADMM iterate on `MaxIter`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub solution: Option<DVector<f64>>,
    pub best_iterate: Option<DVector<f64>>,
    pub objective: f64,
    pub iterations: usize,
    /// Largest constraint violation at the returned point.
    pub primal_residual: f64,
    /// Stationarity residual (QP only; zero for LPs).
    pub dual_residual: f64,
}

impl SolveReport {
    pub(crate) fn failed(status: SolveStatus, iterations: usize) -> Self {
        Self {
            status,
            solution: None,
            best_iterate: None,
            objective: f64::NAN,
            iterations,
            primal_residual: f64::INFINITY,
            dual_residual: f64::INFINITY,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

/// Every tolerance the solvers use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub lp_pivot: f64,
    pub lp_feasibility: f64,
    pub lp_optimality: f64,
    /// Dense tableaus larger than this (entries) go to the sparse engine.
    pub lp_dense_max_entries: usize,
    pub qp_eps_abs: f64,
    pub qp_eps_rel: f64,
    pub qp_max_iter: usize,
    pub qp_kkt: f64,
    pub qp_infeasible_residual: f64,
    pub dare_tol: f64,
    pub dare_max_iter: usize,
    pub lyapunov_direct_max_n: usize,
    pub lyapunov_series_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            lp_pivot: 1e-9,
            lp_feasibility: 1e-9,
            lp_optimality: 1e-10,
            lp_dense_max_entries: 400_000,
            qp_eps_abs: 1e-7,
            qp_eps_rel: 1e-7,
            qp_max_iter: 20_000,
            qp_kkt: 1e-7,
            qp_infeasible_residual: 1e-6,
            dare_tol: 1e-12,
            dare_max_iter: 100_000,
            lyapunov_direct_max_n: 60,
            lyapunov_series_tol: 1e-14,
        }
    }
}
