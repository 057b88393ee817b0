//! Convex QP via operator splitting (ADMM) with adaptive penalty, followed by
//! an active-set polish that solves the reduced KKT system exactly.

use log::trace;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::{SolveReport, SolveStatus, SolverError, Tolerances};

const SIGMA: f64 = 1e-6;
const RELAXATION: f64 = 1.6;
const RHO_INIT: f64 = 0.1;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const EQ_RHO_SCALE: f64 = 1e3;
const ADAPT_EVERY: usize = 25;
const INFEAS_EPS: f64 = 1e-5;
const POLISH_REG: f64 = 1e-10;
const POLISH_REFINE: usize = 5;

/// `min ½xᵀQx + cᵀx  s.t.  Ax ≤ b,  Cx = d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpProblem {
    pub quadratic: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub ineq: Option<(DMatrix<f64>, DVector<f64>)>,
    pub eq: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl QpProblem {
    pub fn new(quadratic: DMatrix<f64>, linear: DVector<f64>) -> Result<Self, SolverError> {
        let n = linear.len();
        if n == 0 || quadratic.nrows() != n || quadratic.ncols() != n {
            return Err(SolverError::Dimension("QP quadratic term"));
        }
        if (&quadratic - quadratic.transpose()).amax() > 1e-10 {
            return Err(SolverError::NotPsd);
        }
        // PSD check: factorization of a slightly shifted copy must succeed.
        let shift = 1e-12 * (1.0 + quadratic.amax());
        let shifted = &quadratic + DMatrix::identity(n, n) * shift;
        if Cholesky::new(shifted).is_none() {
            return Err(SolverError::NotPsd);
        }
        Ok(Self { quadratic, linear, ineq: None, eq: None })
    }

    pub fn with_ineq(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Result<Self, SolverError> {
        if a.ncols() != self.nvars() || a.nrows() != b.len() {
            return Err(SolverError::Dimension("QP inequality"));
        }
        self.ineq = Some((a, b));
        Ok(self)
    }

    pub fn with_eq(mut self, c: DMatrix<f64>, d: DVector<f64>) -> Result<Self, SolverError> {
        if c.ncols() != self.nvars() || c.nrows() != d.len() {
            return Err(SolverError::Dimension("QP equality"));
        }
        self.eq = Some((c, d));
        Ok(self)
    }

    pub fn nvars(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.quadratic * x)) + self.linear.dot(x)
    }

    /// Stacks constraints as `l ≤ Ax ≤ u`.
    fn stacked(&self) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let n = self.nvars();
        let mi = self.ineq.as_ref().map_or(0, |(a, _)| a.nrows());
        let me = self.eq.as_ref().map_or(0, |(c, _)| c.nrows());
        let mut a = DMatrix::zeros(mi + me, n);
        let mut l = DVector::from_element(mi + me, f64::NEG_INFINITY);
        let mut u = DVector::zeros(mi + me);
        if let Some((ai, bi)) = &self.ineq {
            a.rows_mut(0, mi).copy_from(ai);
            u.rows_mut(0, mi).copy_from(bi);
        }
        if let Some((ce, de)) = &self.eq {
            a.rows_mut(mi, me).copy_from(ce);
            l.rows_mut(mi, me).copy_from(de);
            u.rows_mut(mi, me).copy_from(de);
        }
        (a, l, u)
    }

    /// Largest violation of `Ax ≤ b` and `|Cx − d|`.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        let mut v: f64 = 0.0;
        if let Some((a, b)) = &self.ineq {
            v = v.max((a * x - b).max());
        }
        if let Some((c, d)) = &self.eq {
            v = v.max((c * x - d).amax());
        }
        v
    }
}

pub fn solve_qp(p: &QpProblem) -> SolveReport {
    solve_qp_with(p, &Tolerances::default())
}

struct Admm<'a> {
    q: &'a DMatrix<f64>,
    c: &'a DVector<f64>,
    a: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    eq_rows: Vec<bool>,
    free_rows: Vec<bool>,
}

impl Admm<'_> {
    fn rho_vec(&self, rho: f64) -> DVector<f64> {
        DVector::from_iterator(
            self.a.nrows(),
            (0..self.a.nrows()).map(|i| {
                if self.free_rows[i] {
                    RHO_MIN
                } else if self.eq_rows[i] {
                    EQ_RHO_SCALE * rho
                } else {
                    rho
                }
            }),
        )
    }

    fn factor(&self, rho: &DVector<f64>) -> Option<Cholesky<f64, Dyn>> {
        let n = self.q.nrows();
        let mut k = self.q + DMatrix::identity(n, n) * SIGMA;
        let scaled = DMatrix::from_fn(self.a.nrows(), n, |i, j| self.a[(i, j)] * rho[i]);
        k += self.a.transpose() * scaled;
        Cholesky::new(k)
    }

    fn project(&self, v: &mut DVector<f64>) {
        for i in 0..v.len() {
            v[i] = v[i].max(self.l[i]).min(self.u[i]);
        }
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.amax()
    }
}

pub fn solve_qp_with(p: &QpProblem, tol: &Tolerances) -> SolveReport {
    let n = p.nvars();
    let (a, l, u) = p.stacked();
    let m = a.nrows();
    let eq_rows: Vec<bool> = (0..m).map(|i| l[i] == u[i]).collect();
    let free_rows: Vec<bool> = (0..m).map(|i| l[i].is_infinite() && u[i].is_infinite()).collect();
    let admm = Admm { q: &p.quadratic, c: &p.linear, a, l, u, eq_rows, free_rows };
    let at = admm.a.transpose();

    let mut rho = RHO_INIT;
    let mut rho_v = admm.rho_vec(rho);
    let Some(mut chol) = admm.factor(&rho_v) else {
        return SolveReport::failed(SolveStatus::MaxIter, 0);
    };

    let mut x = DVector::zeros(n);
    let mut z = DVector::zeros(m);
    admm.project(&mut z);
    let mut y = DVector::zeros(m);
    let mut iters = 0;
    let mut converged = false;
    let mut infeasible = false;

    while iters < tol.qp_max_iter {
        iters += 1;
        let rhs = &x * SIGMA - admm.c + &at * (rho_v.component_mul(&z) - &y);
        let x_tilde = chol.solve(&rhs);
        let z_tilde = &admm.a * &x_tilde;
        x = &x_tilde * RELAXATION + &x * (1.0 - RELAXATION);
        let z_relaxed = &z_tilde * RELAXATION + &z * (1.0 - RELAXATION);
        let mut z_new = &z_relaxed + y.component_div(&rho_v);
        admm.project(&mut z_new);
        let dy = rho_v.component_mul(&(&z_relaxed - &z_new));
        y += &dy;
        z = z_new;

        let ax = &admm.a * &x;
        let qx = admm.q * &x;
        let aty = &at * &y;
        let r_prim = inf_norm(&(&ax - &z));
        let r_dual = inf_norm(&(&qx + admm.c + &aty));
        let prim_scale = inf_norm(&ax).max(inf_norm(&z));
        let dual_scale = inf_norm(&qx).max(inf_norm(&aty)).max(inf_norm(admm.c));
        let eps_prim = tol.qp_eps_abs + tol.qp_eps_rel * prim_scale;
        let eps_dual = tol.qp_eps_abs + tol.qp_eps_rel * dual_scale;
        if r_prim <= eps_prim && r_dual <= eps_dual {
            converged = true;
            break;
        }
        if m > 0 && primal_infeasibility_certificate(&admm, &at, &dy) {
            infeasible = true;
            break;
        }
        if iters % ADAPT_EVERY == 0 {
            let num = r_prim / prim_scale.max(1e-12);
            let den = r_dual / dual_scale.max(1e-12);
            let ratio = (num / den.max(1e-30)).sqrt();
            if !(0.2..=5.0).contains(&ratio) {
                let new_rho = (rho * ratio).clamp(RHO_MIN, RHO_MAX);
                let new_v = admm.rho_vec(new_rho);
                if let Some(c) = admm.factor(&new_v) {
                    // Keep y consistent: z-update uses y/ρ, nothing else to rescale.
                    rho = new_rho;
                    rho_v = new_v;
                    chol = c;
                    trace!("qp: rho -> {rho:e} at iter {iters}");
                }
            }
        }
    }

    if infeasible {
        return SolveReport::failed(SolveStatus::Infeasible, iters);
    }

    let polished = polish(&admm, &x, &z, &y, tol);
    let was_polished = polished.is_some();
    let (x_out, y_out) = match polished {
        Some(sol) => sol,
        None => (x.clone(), y.clone()),
    };
    let viol = p.violation(&x_out);
    let stat = inf_norm(&(admm.q * &x_out + admm.c + &at * &y_out));
    let ok = viol <= tol.qp_kkt.max(tol.qp_eps_abs) * (1.0 + inf_norm(&admm.u.map(|v| if v.is_finite() { v } else { 0.0 })))
        && stat <= tol.qp_kkt * (1.0 + inf_norm(admm.c));
    if ok || (converged && !was_polished && viol <= tol.qp_infeasible_residual) {
        return SolveReport {
            status: SolveStatus::Optimal,
            objective: p.objective(&x_out),
            solution: Some(x_out),
            best_iterate: None,
            iterations: iters,
            primal_residual: viol,
            dual_residual: stat,
        };
    }
    let status = if viol > tol.qp_infeasible_residual && !converged {
        SolveStatus::Infeasible
    } else {
        SolveStatus::MaxIter
    };
    SolveReport {
        status,
        objective: p.objective(&x_out),
        solution: None,
        best_iterate: Some(x_out),
        iterations: iters,
        primal_residual: viol,
        dual_residual: stat,
    }
}

fn primal_infeasibility_certificate(admm: &Admm<'_>, at: &DMatrix<f64>, dy: &DVector<f64>) -> bool {
    let norm = inf_norm(dy);
    if norm < 1e-12 {
        return false;
    }
    if inf_norm(&(at * dy)) > INFEAS_EPS * norm {
        return false;
    }
    let mut s = 0.0;
    for i in 0..dy.len() {
        if dy[i] > 0.0 {
            if admm.u[i].is_infinite() {
                return false;
            }
            s += admm.u[i] * dy[i];
        } else if dy[i] < 0.0 {
            if admm.l[i].is_infinite() {
                return false;
            }
            s += admm.l[i] * dy[i];
        }
    }
    s < -INFEAS_EPS * norm
}

/// Guess the active set from the ADMM iterate and solve the equality-
/// constrained KKT system on it. Returns `None` unless the polished point is
/// primal feasible with correctly signed multipliers.
fn polish(
    admm: &Admm<'_>,
    x: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
    tol: &Tolerances,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = x.len();
    let m = z.len();
    let mut active: Vec<(usize, f64)> = Vec::new();
    for i in 0..m {
        if admm.free_rows[i] {
            continue;
        }
        if admm.eq_rows[i] || z[i] - admm.l[i] < -y[i] {
            active.push((i, admm.l[i]));
        } else if admm.u[i] - z[i] < y[i] {
            active.push((i, admm.u[i]));
        }
    }
    let k = active.len();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(admm.q);
    for (r, &(i, _)) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = admm.a[(i, j)];
            kkt[(j, n + r)] = admm.a[(i, j)];
        }
    }
    let mut reg = kkt.clone();
    for j in 0..n {
        reg[(j, j)] += POLISH_REG;
    }
    for r in 0..k {
        reg[(n + r, n + r)] -= POLISH_REG;
    }
    let lu = reg.lu();
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-admm.c));
    for (r, &(_, v)) in active.iter().enumerate() {
        rhs[n + r] = v;
    }
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..POLISH_REFINE {
        let resid = &rhs - &kkt * &sol;
        sol += lu.solve(&resid)?;
    }
    let xp = sol.rows(0, n).into_owned();
    let mut yp = DVector::zeros(m);
    for (r, &(i, _)) in active.iter().enumerate() {
        yp[i] = sol[n + r];
    }
    let ax = &admm.a * &xp;
    let scale = 1.0 + inf_norm(&ax);
    for i in 0..m {
        if ax[i] > admm.u[i] + tol.qp_kkt * scale || ax[i] < admm.l[i] - tol.qp_kkt * scale {
            return None;
        }
    }
    for (i, _) in &active {
        let i = *i;
        if admm.eq_rows[i] {
            continue;
        }
        let at_lower = (ax[i] - admm.l[i]).abs() <= (ax[i] - admm.u[i]).abs();
        if (at_lower && yp[i] > tol.qp_kkt) || (!at_lower && yp[i] < -tol.qp_kkt) {
            return None;
        }
    }
    Some((xp, yp))
}
