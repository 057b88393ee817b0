//! Feedback synthesis and the online tube MPC problem.
//!
//! The input is `u = Ks + c` with `K` the LQR gain of the lifted model. Only
//! the corrections `c_0 … c_{N−1}` are decided online; the nominal states
//! are eliminated through `s̄_i = Φ^i s + Σ_{j<i} Φ^{i−1−j} B c_j`, leaving a
//! dense QP `min Σ c_iᵀΠc_i` under tube constraints that are affine in `c`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::HPolytope;
use crate::io;
use crate::koopman::{KoopmanError, LiftedModel};
use crate::solvers::{
    self, solve_dare, solve_discrete_lyapunov, spectral_radius, LpProblem, QpProblem, SolveReport, SolveStatus,
    SolverError,
};
use crate::tubes::TubeSet;

/// Constraint tolerance for feasibility decisions.
pub const FEAS_TOL: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("lifting failed: {0}")]
    Lift(String),
    #[error("MPC infeasible at state {state:?}; first violated constraint: {first_violation}")]
    InfeasibleAtState { state: Vec<f64>, first_violation: RowTag },
}

impl From<KoopmanError> for ControllerError {
    fn from(e: KoopmanError) -> Self {
        Self::Lift(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Synthesis {
    #[serde(with = "io::rows")]
    pub k: DMatrix<f64>,
    #[serde(with = "io::rows")]
    pub p: DMatrix<f64>,
    #[serde(with = "io::rows")]
    pub pi: DMatrix<f64>,
    #[serde(with = "io::rows")]
    pub phi: DMatrix<f64>,
    /// State weight in lifted coordinates.
    #[serde(with = "io::rows")]
    pub q_lifted: DMatrix<f64>,
    #[serde(with = "io::rows")]
    pub r: DMatrix<f64>,
    pub spectral_radius: f64,
    pub lyapunov_residual: f64,
}

/// LQR gain from the DARE, `P` from the closed-loop Lyapunov equation
/// `P − ΦᵀPΦ = Q̄ + KᵀRK`, and `Π = R + BᵀPB`.
///
/// `q` may be given on the original state (`Q̄ = CᵀQC`) or on the full
/// lifted state; the dimension decides.
pub fn synthesize(model: &LiftedModel, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<Synthesis, ControllerError> {
    let (n, nx, nu) = (model.n(), model.n_x(), model.n_u());
    let q_lifted = match q.shape() {
        s if s == (n, n) => q.clone(),
        s if s == (nx, nx) => model.c.transpose() * q * &model.c,
        s => return Err(ControllerError::Dimension(format!("Q is {s:?}; expected {nx}×{nx} or {n}×{n}"))),
    };
    if r.shape() != (nu, nu) {
        return Err(ControllerError::Dimension(format!("R is {:?}; expected {nu}×{nu}", r.shape())));
    }
    let dare = solve_dare(&model.a, &model.b, &q_lifted, r)?;
    let k = dare.k;
    let phi = &model.a + &model.b * &k;
    let m = &q_lifted + k.transpose() * r * &k;
    let p = solve_discrete_lyapunov(&phi, &m)?;
    let lyapunov_residual = (&p - phi.transpose() * &p * &phi - &m).amax() / (1.0 + m.amax());
    let pi = r + model.b.transpose() * &p * &model.b;
    let pi = (&pi + pi.transpose()) * 0.5;
    if pi.clone().cholesky().is_none() {
        return Err(SolverError::NotPsd.into());
    }
    Ok(Synthesis { spectral_radius: spectral_radius(&phi), k, p, pi, phi, q_lifted, r: r.clone(), lyapunov_residual })
}

/// Which tube constraint a QP row comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowTag {
    /// `ū_i ∈ Ū_i`.
    Input { stage: usize, row: usize },
    /// `s̄_i ∈ S̄_i`.
    State { stage: usize, row: usize },
    /// `s̄_N ∈ S̄_∞`.
    Terminal { row: usize },
}

impl fmt::Display for RowTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Input { stage, row } => write!(f, "input stage {stage} row {row}"),
            Self::State { stage, row } => write!(f, "state stage {stage} row {row}"),
            Self::Terminal { row } => write!(f, "terminal row {row}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSolution {
    /// `c*_i`, one row per stage.
    #[serde(with = "io::rows")]
    pub c: DMatrix<f64>,
    /// `s̄_0 … s̄_N`.
    pub nominal_states: Vec<DVector<f64>>,
    /// `ū_0 … ū_{N−1}`.
    pub nominal_inputs: Vec<DVector<f64>>,
    pub objective: f64,
    pub report: SolveReport,
    pub feasible: bool,
    /// Largest tube-constraint violation at `c`.
    pub max_violation: f64,
}

/// Tube MPC with the condensed QP structure precomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    pub model: LiftedModel,
    pub synthesis: Synthesis,
    pub tubes: TubeSet,
    pub horizon: usize,
    /// Constraint rows: `A c ≤ b0 − S s`.
    #[serde(with = "io::rows")]
    a: DMatrix<f64>,
    b0: DVector<f64>,
    #[serde(with = "io::rows")]
    s_map: DMatrix<f64>,
    tags: Vec<RowTag>,
    /// `s̄_i = M_i s + L_i c`.
    #[serde(skip)]
    prediction: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    #[serde(with = "io::rows")]
    hessian: DMatrix<f64>,
}

fn predictions(phi: &DMatrix<f64>, b: &DMatrix<f64>, horizon: usize) -> Vec<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, nu) = b.shape();
    let mut out = Vec::with_capacity(horizon + 1);
    let mut m = DMatrix::identity(n, n);
    let mut l = DMatrix::zeros(n, horizon * nu);
    out.push((m.clone(), l.clone()));
    for i in 0..horizon {
        m = phi * m;
        l = phi * l;
        l.columns_mut(i * nu, nu).copy_from(b);
        out.push((m.clone(), l.clone()));
    }
    out
}

impl Controller {
    pub fn new(model: LiftedModel, synthesis: Synthesis, tubes: TubeSet) -> Result<Self, ControllerError> {
        let horizon = tubes.horizon();
        let (n, nu) = (model.n(), model.n_u());
        if tubes.input.len() < horizon || synthesis.k.shape() != (nu, n) || tubes.terminal.dim() != n {
            return Err(ControllerError::Dimension("tube set does not match model or horizon".into()));
        }
        let pred = predictions(&synthesis.phi, &model.b, horizon);
        let nc = horizon * nu;
        let mut rows_a: Vec<DMatrix<f64>> = Vec::new();
        let mut rows_s: Vec<DMatrix<f64>> = Vec::new();
        let mut rhs: Vec<f64> = Vec::new();
        let mut tags = Vec::new();
        let mut push = |set: &HPolytope, m: DMatrix<f64>, l: DMatrix<f64>, tag: &dyn Fn(usize) -> RowTag| {
            rows_a.push(&set.h * l);
            rows_s.push(&set.h * m);
            rhs.extend(set.b.iter());
            tags.extend((0..set.nrows()).map(tag));
        };
        for i in 0..horizon {
            // ū_i = K s̄_i + c_i.
            let (m, l) = &pred[i];
            let mut lu = &synthesis.k * l;
            for r in 0..nu {
                lu[(r, i * nu + r)] += 1.0;
            }
            push(&tubes.input[i], &synthesis.k * m, lu, &|row| RowTag::Input { stage: i, row });
            let (m, l) = &pred[i + 1];
            push(&tubes.state[i], m.clone(), l.clone(), &|row| RowTag::State { stage: i + 1, row });
        }
        let (m, l) = &pred[horizon];
        push(&tubes.terminal, m.clone(), l.clone(), &|row| RowTag::Terminal { row });
        let total: usize = rows_a.iter().map(|r| r.nrows()).sum();
        let mut a = DMatrix::zeros(total, nc);
        let mut s_map = DMatrix::zeros(total, n);
        let mut at = 0;
        for (ra, rs) in rows_a.iter().zip(&rows_s) {
            a.rows_mut(at, ra.nrows()).copy_from(ra);
            s_map.rows_mut(at, rs.nrows()).copy_from(rs);
            at += ra.nrows();
        }
        let mut hessian = DMatrix::zeros(nc, nc);
        for i in 0..horizon {
            hessian.view_mut((i * nu, i * nu), (nu, nu)).copy_from(&(&synthesis.pi * 2.0));
        }
        Ok(Self {
            model,
            synthesis,
            tubes,
            horizon,
            a,
            b0: DVector::from_vec(rhs),
            s_map,
            tags,
            prediction: pred,
            hessian,
        })
    }

    fn ensure_prediction(&mut self) {
        if self.prediction.is_empty() {
            self.prediction = predictions(&self.synthesis.phi, &self.model.b, self.horizon);
        }
    }

    /// Restore caches skipped during serialization.
    pub fn rehydrate(mut self) -> Self {
        self.ensure_prediction();
        self
    }

    pub fn n_constraints(&self) -> usize {
        self.a.nrows()
    }

    fn rhs(&self, s: &DVector<f64>) -> DVector<f64> {
        &self.b0 - &self.s_map * s
    }

    /// `max_r (A c − rhs(s))_r` together with the offending row.
    pub fn constraint_violation(&self, s: &DVector<f64>, c: &DVector<f64>) -> (f64, RowTag) {
        let v = &self.a * c - self.rhs(s);
        let (idx, val) = v.argmax();
        (val, self.tags[idx])
    }

    fn objective(&self, c: &DVector<f64>) -> f64 {
        let nu = self.model.n_u();
        (0..self.horizon)
            .map(|i| {
                let ci = c.rows(i * nu, nu);
                (ci.transpose() * &self.synthesis.pi * ci)[(0, 0)]
            })
            .sum()
    }

    /// Minimum total violation: an LP in `(c, t)` with `Ac − t ≤ rhs`, `t ≥ 0`.
    fn phase_one(&self, s: &DVector<f64>) -> Result<(f64, RowTag), ControllerError> {
        let nc = self.a.ncols();
        let mut cost = DVector::zeros(nc + 1);
        cost[nc] = 1.0;
        let rhs = self.rhs(s);
        let mut lp = LpProblem::new(cost);
        for r in 0..self.a.nrows() {
            let mut coeffs: Vec<(usize, f64)> = (0..nc).map(|j| (j, self.a[(r, j)])).collect();
            coeffs.push((nc, -1.0));
            lp.push_le(coeffs, rhs[r]);
        }
        let mut bounds = vec![(f64::NEG_INFINITY, f64::INFINITY); nc];
        bounds.push((0.0, f64::INFINITY));
        let report = solvers::solve_lp(&lp.with_bounds(bounds));
        match (report.status, report.solution) {
            (SolveStatus::Optimal, Some(x)) => {
                let c = x.rows(0, nc).into_owned();
                let (_, tag) = self.constraint_violation(s, &c);
                let first = (0..self.a.nrows())
                    .find(|&r| (self.a.row(r) * &c)[(0, 0)] - rhs[r] > FEAS_TOL)
                    .map_or(tag, |r| self.tags[r]);
                Ok((x[nc], first))
            }
            (status, _) => Err(ControllerError::Dimension(format!("phase-one LP ended with {status:?}"))),
        }
    }

    fn assemble(&self, s: &DVector<f64>, c: DVector<f64>, report: SolveReport, feasible: bool) -> MpcSolution {
        let nu = self.model.n_u();
        let nominal_states: Vec<DVector<f64>> = self.prediction.iter().map(|(m, l)| m * s + l * &c).collect();
        let nominal_inputs = (0..self.horizon)
            .map(|i| &self.synthesis.k * &nominal_states[i] + c.rows(i * nu, nu))
            .collect();
        let (max_violation, _) = self.constraint_violation(s, &c);
        MpcSolution {
            c: DMatrix::from_fn(self.horizon, nu, |i, j| c[i * nu + j]),
            nominal_states,
            nominal_inputs,
            objective: self.objective(&c),
            report,
            feasible,
            max_violation,
        }
    }

    /// Solve the MPC problem from lifted state `s`.
    pub fn solve_mpc(&self, s: &DVector<f64>) -> Result<MpcSolution, ControllerError> {
        if s.len() != self.model.n() || s.iter().any(|v| !v.is_finite()) {
            return Err(ControllerError::Dimension("lifted state must be finite with the model dimension".into()));
        }
        let nc = self.a.ncols();
        let qp = QpProblem::new(self.hessian.clone(), DVector::zeros(nc))?.with_ineq(self.a.clone(), self.rhs(s))?;
        let report = solvers::solve_qp(&qp);
        let candidate = report.solution.clone().or_else(|| report.best_iterate.clone());
        if let Some(c) = candidate {
            let (viol, _) = self.constraint_violation(s, &c);
            if viol <= FEAS_TOL {
                return Ok(self.assemble(s, c, report, true));
            }
        }
        let (t, first) = self.phase_one(s)?;
        if t <= FEAS_TOL {
            return Err(ControllerError::Dimension(format!(
                "QP solver ended with {:?} although the constraints are feasible",
                report.status
            )));
        }
        let c = report.best_iterate.clone().unwrap_or_else(|| DVector::zeros(nc));
        let mut sol = self.assemble(s, c, report, false);
        sol.report.status = SolveStatus::Infeasible;
        log::debug!("MPC infeasible; minimal violation {t:.3e}, first violated {first}");
        Ok(sol)
    }

    /// `u_k = K·Ψ(x_k) + c*_0`.
    pub fn control_step(&self, x: &DVector<f64>) -> Result<(DVector<f64>, MpcSolution), ControllerError> {
        let s = self.model.dictionary.lift(x)?;
        let sol = self.solve_mpc(&s)?;
        if !sol.feasible {
            let (_, first_violation) = self.phase_one(&s)?;
            return Err(ControllerError::InfeasibleAtState { state: x.iter().copied().collect(), first_violation });
        }
        let u = &self.synthesis.k * &s + sol.c.row(0).transpose();
        debug_assert!(self.tubes.input[0].contains(&u, FEAS_TOL));
        Ok((u, sol))
    }

    /// Whether `(c*_1, …, c*_{N−1}, 0)` from the previous solution is
    /// feasible from lifted state `s`; returns the largest violation too.
    pub fn shifted_candidate(&self, prev: &MpcSolution, s: &DVector<f64>) -> (bool, f64) {
        let nu = self.model.n_u();
        let mut c = DVector::zeros(self.horizon * nu);
        for i in 1..self.horizon {
            for j in 0..nu {
                c[(i - 1) * nu + j] = prev.c[(i, j)];
            }
        }
        let (v, _) = self.constraint_violation(s, &c);
        (v <= FEAS_TOL, v)
    }
}
