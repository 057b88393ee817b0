use log::debug;
use nalgebra::{DMatrix, DVector};

use super::simplex;
use super::{SolveReport, SolveStatus, Tolerances};

/// One sparse linear constraint row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl SparseRow {
    pub fn new(coeffs: Vec<(usize, f64)>, rhs: f64) -> Self {
        Self { coeffs, rhs }
    }

    pub fn dot(&self, x: &DVector<f64>) -> f64 {
        self.coeffs.iter().map(|&(j, a)| a * x[j]).sum()
    }
}

/// `min cᵀx  s.t.  Ax ≤ b,  Cx = d,  lo ≤ x ≤ hi`.
///
/// Variables are free unless bounds are set.
#[derive(Debug, Clone, PartialEq)]
pub struct LpProblem {
    pub cost: DVector<f64>,
    pub ineq: Vec<SparseRow>,
    pub eq: Vec<SparseRow>,
    pub bounds: Vec<(f64, f64)>,
}

impl LpProblem {
    pub fn new(cost: DVector<f64>) -> Self {
        let n = cost.len();
        assert!(n > 0, "LP needs at least one variable");
        Self {
            cost,
            ineq: Vec::new(),
            eq: Vec::new(),
            bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); n],
        }
    }

    pub fn nvars(&self) -> usize {
        self.cost.len()
    }

    pub fn with_ineq(mut self, a: &DMatrix<f64>, b: &DVector<f64>) -> Self {
        assert_eq!(a.ncols(), self.nvars(), "inequality matrix width");
        assert_eq!(a.nrows(), b.len(), "inequality rhs length");
        self.ineq.extend(dense_rows(a, b));
        self
    }

    pub fn with_eq(mut self, c: &DMatrix<f64>, d: &DVector<f64>) -> Self {
        assert_eq!(c.ncols(), self.nvars(), "equality matrix width");
        assert_eq!(c.nrows(), d.len(), "equality rhs length");
        self.eq.extend(dense_rows(c, d));
        self
    }

    pub fn with_bounds(mut self, bounds: Vec<(f64, f64)>) -> Self {
        assert_eq!(bounds.len(), self.nvars(), "bounds length");
        self.bounds = bounds;
        self
    }

    pub fn free_vars(mut self) -> Self {
        self.bounds = vec![(f64::NEG_INFINITY, f64::INFINITY); self.nvars()];
        self
    }

    pub fn nonnegative(mut self) -> Self {
        self.bounds = vec![(0.0, f64::INFINITY); self.nvars()];
        self
    }

    pub fn push_le(&mut self, coeffs: Vec<(usize, f64)>, rhs: f64) {
        self.ineq.push(SparseRow::new(coeffs, rhs));
    }

    pub fn push_eq(&mut self, coeffs: Vec<(usize, f64)>, rhs: f64) {
        self.eq.push(SparseRow::new(coeffs, rhs));
    }

    /// Largest violation of rows and bounds at `x`.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        let mut v: f64 = 0.0;
        for r in &self.ineq {
            v = v.max(r.dot(x) - r.rhs);
        }
        for r in &self.eq {
            v = v.max((r.dot(x) - r.rhs).abs());
        }
        for (j, &(lo, hi)) in self.bounds.iter().enumerate() {
            v = v.max(lo - x[j]).max(x[j] - hi);
        }
        v
    }

    /// Size of the dense standard-form tableau this problem would need.
    fn dense_entries(&self) -> usize {
        let mut cols = 0;
        let mut extra_rows = 0;
        for &(lo, hi) in &self.bounds {
            if lo.is_finite() || hi.is_finite() {
                cols += 1;
                if lo.is_finite() && hi.is_finite() {
                    extra_rows += 1;
                }
            } else {
                cols += 2;
            }
        }
        let m = self.ineq.len() + self.eq.len() + extra_rows;
        m * (cols + 2 * m + 1)
    }
}

fn dense_rows(a: &DMatrix<f64>, b: &DVector<f64>) -> Vec<SparseRow> {
    (0..a.nrows())
        .map(|i| {
            let coeffs = (0..a.ncols())
                .filter_map(|j| {
                    let v = a[(i, j)];
                    (v != 0.0).then_some((j, v))
                })
                .collect();
            SparseRow::new(coeffs, b[i])
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpEngine {
    /// Pick by size.
    Auto,
    /// Dense two-phase tableau simplex.
    DenseSimplex,
    /// Sparse revised simplex (`microlp`).
    Sparse,
}

pub fn solve_lp(p: &LpProblem) -> SolveReport {
    solve_lp_with(p, LpEngine::Auto, &Tolerances::default())
}

pub fn solve_lp_with(p: &LpProblem, engine: LpEngine, tol: &Tolerances) -> SolveReport {
    let engine = match engine {
        LpEngine::Auto if p.dense_entries() > tol.lp_dense_max_entries => LpEngine::Sparse,
        LpEngine::Auto => LpEngine::DenseSimplex,
        e => e,
    };
    let mut report = match engine {
        LpEngine::Sparse => solve_sparse(p),
        _ => simplex::solve(p, tol),
    };
    if let Some(x) = &report.solution {
        report.primal_residual = p.violation(x);
        report.objective = p.cost.dot(x);
    }
    report
}

fn solve_sparse(p: &LpProblem) -> SolveReport {
    use microlp::{ComparisonOp, OptimizationDirection, Problem};

    let mut prob = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<_> = p
        .cost
        .iter()
        .zip(&p.bounds)
        .map(|(&c, &b)| prob.add_var(c, b))
        .collect();
    for (rows, op) in [(&p.ineq, ComparisonOp::Le), (&p.eq, ComparisonOp::Eq)] {
        for r in rows {
            let expr: Vec<_> = r.coeffs.iter().map(|&(j, a)| (vars[j], a)).collect();
            prob.add_constraint(expr, op, r.rhs);
        }
    }
    match prob.solve() {
        Ok(outcome) => {
            let iterations = outcome.stats().lp_iterations as usize;
            match outcome.into_solution() {
                Ok(sol) => {
                    let x = DVector::from_iterator(vars.len(), vars.iter().map(|&v| sol.var_value(v)));
                    SolveReport {
                        status: SolveStatus::Optimal,
                        objective: sol.objective(),
                        solution: Some(x),
                        best_iterate: None,
                        iterations,
                        primal_residual: 0.0,
                        dual_residual: 0.0,
                    }
                }
                Err(_) => SolveReport::failed(SolveStatus::MaxIter, iterations),
            }
        }
        Err(microlp::Error::Infeasible) => SolveReport::failed(SolveStatus::Infeasible, 0),
        Err(microlp::Error::Unbounded) => SolveReport::failed(SolveStatus::Unbounded, 0),
        Err(e) => {
            debug!("sparse LP engine failed: {e}");
            SolveReport::failed(SolveStatus::MaxIter, 0)
        }
    }
}
