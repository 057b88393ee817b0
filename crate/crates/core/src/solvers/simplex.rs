//! Dense two-phase tableau simplex.
//!
//! Dantzig pricing, switching to Bland's rule after a run of degenerate
//! pivots so cycling cannot persist.

use nalgebra::DVector;

use super::lp::LpProblem;
use super::{SolveReport, SolveStatus, Tolerances};

const DEGENERATE_RUN_BEFORE_BLAND: usize = 50;

/// How an original variable maps onto nonnegative standard-form columns.
#[derive(Debug, Clone, Copy)]
enum VarMap {
    /// x = lo + y
    Lower(f64, usize),
    /// x = hi - y
    Upper(f64, usize),
    /// x = y⁺ - y⁻
    Split(usize, usize),
}

struct Tableau {
    m: usize,
    n: usize,
    /// Row-major, `m × (n + 1)`; last column is the rhs.
    t: Vec<f64>,
    /// Reduced costs, last entry is minus the objective.
    obj: Vec<f64>,
    basis: Vec<usize>,
}

enum Phase {
    Optimal,
    Unbounded,
    IterLimit,
}

impl Tableau {
    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.t[i * (self.n + 1) + j]
    }

    #[inline]
    fn rhs(&self, i: usize) -> f64 {
        self.t[i * (self.n + 1) + self.n]
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let w = self.n + 1;
        let p = self.t[r * w + c];
        for v in &mut self.t[r * w..(r + 1) * w] {
            *v /= p;
        }
        let prow: Vec<f64> = self.t[r * w..(r + 1) * w].to_vec();
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.t[i * w + c];
            if f != 0.0 {
                let row = &mut self.t[i * w..(i + 1) * w];
                for (v, &pv) in row.iter_mut().zip(&prow) {
                    *v -= f * pv;
                }
                row[c] = 0.0;
            }
        }
        let f = self.obj[c];
        if f != 0.0 {
            for (v, &pv) in self.obj.iter_mut().zip(&prow) {
                *v -= f * pv;
            }
            self.obj[c] = 0.0;
        }
        self.basis[r] = c;
    }

    fn set_costs(&mut self, cost: &[f64]) {
        self.obj.clear();
        self.obj.extend_from_slice(cost);
        self.obj.push(0.0);
        for i in 0..self.m {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                for j in 0..=self.n {
                    self.obj[j] -= cb * self.at(i, j);
                }
            }
        }
    }

    fn run(&mut self, allowed: &[bool], tol: &Tolerances, max_iter: usize, iters: &mut usize) -> Phase {
        let mut degenerate_run = 0;
        loop {
            if *iters >= max_iter {
                return Phase::IterLimit;
            }
            let bland = degenerate_run >= DEGENERATE_RUN_BEFORE_BLAND;
            let mut enter = None;
            let mut best = -tol.lp_optimality;
            for j in 0..self.n {
                if !allowed[j] {
                    continue;
                }
                let d = self.obj[j];
                if d < best {
                    enter = Some(j);
                    if bland {
                        break;
                    }
                    best = d;
                }
            }
            let Some(c) = enter else {
                return Phase::Optimal;
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.m {
                let a = self.at(i, c);
                if a > tol.lp_pivot {
                    let ratio = self.rhs(i).max(0.0) / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((r, best_ratio)) => {
                            if ratio < best_ratio - 1e-12
                                || (ratio <= best_ratio + 1e-12 && self.basis[i] < self.basis[r])
                            {
                                Some((i, ratio))
                            } else {
                                Some((r, best_ratio))
                            }
                        }
                    };
                }
            }
            let Some((r, ratio)) = leave else {
                return Phase::Unbounded;
            };
            if ratio <= 1e-12 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            self.pivot(r, c);
            *iters += 1;
        }
    }
}

pub(super) fn solve(p: &LpProblem, tol: &Tolerances) -> SolveReport {
    // Column layout: structural y, then one slack per inequality, then artificials.
    let mut maps = Vec::with_capacity(p.nvars());
    let mut ny = 0;
    let mut bound_rows: Vec<(usize, f64)> = Vec::new();
    for &(lo, hi) in &p.bounds {
        if lo > hi {
            return SolveReport::failed(SolveStatus::Infeasible, 0);
        }
        let map = if lo.is_finite() {
            if hi.is_finite() {
                bound_rows.push((ny, hi - lo));
            }
            VarMap::Lower(lo, ny)
        } else if hi.is_finite() {
            VarMap::Upper(hi, ny)
        } else {
            ny += 1;
            VarMap::Split(ny - 1, ny)
        };
        ny += 1;
        maps.push(map);
    }

    // Each row in y-space: (coeffs, rhs, is_equality).
    let mut rows: Vec<(Vec<(usize, f64)>, f64, bool)> = Vec::new();
    let mut cost_y = vec![0.0; ny];
    for (j, &c) in p.cost.iter().enumerate() {
        match maps[j] {
            VarMap::Lower(_, k) => cost_y[k] += c,
            VarMap::Upper(_, k) => cost_y[k] -= c,
            VarMap::Split(a, b) => {
                cost_y[a] += c;
                cost_y[b] -= c;
            }
        }
    }
    let transform = |coeffs: &[(usize, f64)], rhs: f64| {
        let mut out = Vec::with_capacity(coeffs.len() + 1);
        let mut r = rhs;
        for &(j, a) in coeffs {
            match maps[j] {
                VarMap::Lower(lo, k) => {
                    out.push((k, a));
                    r -= a * lo;
                }
                VarMap::Upper(hi, k) => {
                    out.push((k, -a));
                    r -= a * hi;
                }
                VarMap::Split(k1, k2) => {
                    out.push((k1, a));
                    out.push((k2, -a));
                }
            }
        }
        (out, r)
    };
    for row in &p.ineq {
        let (c, r) = transform(&row.coeffs, row.rhs);
        rows.push((c, r, false));
    }
    for &(k, width) in &bound_rows {
        rows.push((vec![(k, 1.0)], width, false));
    }
    for row in &p.eq {
        let (c, r) = transform(&row.coeffs, row.rhs);
        rows.push((c, r, true));
    }

    let m = rows.len();
    if m == 0 {
        // Only bounds: optimum sits at a bound per coordinate.
        let mut x = DVector::zeros(p.nvars());
        for j in 0..p.nvars() {
            let (lo, hi) = p.bounds[j];
            let c = p.cost[j];
            x[j] = if c > 0.0 {
                lo
            } else if c < 0.0 {
                hi
            } else if lo.is_finite() {
                lo
            } else if hi.is_finite() {
                hi
            } else {
                0.0
            };
            if !x[j].is_finite() {
                return SolveReport::failed(SolveStatus::Unbounded, 0);
            }
        }
        return optimal(p, x, 0);
    }

    let n_slack = rows.iter().filter(|r| !r.2).count();
    // A row needs an artificial if it is an equality or its slack enters with -1.
    let needs_art: Vec<bool> = rows.iter().map(|(_, r, eq)| *eq || *r < 0.0).collect();
    let n_art = needs_art.iter().filter(|&&b| b).count();
    let n = ny + n_slack + n_art;
    let w = n + 1;
    let mut t = vec![0.0; m * w];
    let mut basis = vec![0; m];
    let mut slack = ny;
    let mut art = ny + n_slack;
    for (i, (coeffs, rhs, eq)) in rows.iter().enumerate() {
        let scale = coeffs.iter().fold(0.0f64, |s, &(_, a)| s.max(a.abs()));
        let scale = if scale > 0.0 { scale } else { 1.0 };
        let sign = if *rhs < 0.0 { -1.0 } else { 1.0 };
        let f = sign / scale;
        let row = &mut t[i * w..(i + 1) * w];
        for &(k, a) in coeffs {
            row[k] += f * a;
        }
        row[n] = f * rhs;
        if !eq {
            // Slack columns are rescaled so basic ones stay unit vectors.
            row[slack] = sign;
            if !needs_art[i] {
                basis[i] = slack;
            }
            slack += 1;
        }
        if needs_art[i] {
            row[art] = 1.0;
            basis[i] = art;
            art += 1;
        }
    }

    let mut tab = Tableau { m, n, t, obj: Vec::with_capacity(w), basis };
    let max_iter = 50 * (m + n) + 1000;
    let mut iters = 0;
    let is_art = |j: usize| j >= ny + n_slack;

    if n_art > 0 {
        let cost1: Vec<f64> = (0..n).map(|j| if is_art(j) { 1.0 } else { 0.0 }).collect();
        tab.set_costs(&cost1);
        let allowed = vec![true; n];
        match tab.run(&allowed, tol, max_iter, &mut iters) {
            Phase::Optimal => {}
            Phase::Unbounded | Phase::IterLimit => return SolveReport::failed(SolveStatus::MaxIter, iters),
        }
        let bmax = (0..m).fold(1.0f64, |s, i| s.max(tab.rhs(i).abs()));
        if -tab.obj[n] > tol.lp_feasibility.max(1e-9) * bmax * 10.0 {
            return SolveReport::failed(SolveStatus::Infeasible, iters);
        }
        for i in 0..m {
            if is_art(tab.basis[i]) {
                let col = (0..ny + n_slack)
                    .filter(|&j| tab.at(i, j).abs() > tol.lp_pivot)
                    .max_by(|&a, &b| tab.at(i, a).abs().total_cmp(&tab.at(i, b).abs()));
                if let Some(c) = col {
                    tab.pivot(i, c);
                }
            }
        }
    }

    let mut cost2 = vec![0.0; n];
    cost2[..ny].copy_from_slice(&cost_y);
    tab.set_costs(&cost2);
    let allowed: Vec<bool> = (0..n).map(|j| !is_art(j)).collect();
    match tab.run(&allowed, tol, max_iter, &mut iters) {
        Phase::Optimal => {}
        Phase::Unbounded => return SolveReport::failed(SolveStatus::Unbounded, iters),
        Phase::IterLimit => return SolveReport::failed(SolveStatus::MaxIter, iters),
    }

    let mut y = vec![0.0; n];
    for i in 0..m {
        y[tab.basis[i]] = tab.rhs(i).max(0.0);
    }
    let x = DVector::from_iterator(
        p.nvars(),
        maps.iter().map(|map| match *map {
            VarMap::Lower(lo, k) => lo + y[k],
            VarMap::Upper(hi, k) => hi - y[k],
            VarMap::Split(a, b) => y[a] - y[b],
        }),
    );
    optimal(p, x, iters)
}

fn optimal(p: &LpProblem, x: DVector<f64>, iterations: usize) -> SolveReport {
    SolveReport {
        status: SolveStatus::Optimal,
        objective: p.cost.dot(&x),
        primal_residual: p.violation(&x),
        solution: Some(x),
        best_iterate: None,
        iterations,
        dual_residual: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector, DMatrix};

    /// Vertex enumeration oracle for tiny 2-D LPs over {Ax ≤ b}.
    fn vertex_oracle(c: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> Option<f64> {
        let mut best: Option<f64> = None;
        for i in 0..a.nrows() {
            for j in i + 1..a.nrows() {
                let m = dmatrix![a[(i, 0)], a[(i, 1)]; a[(j, 0)], a[(j, 1)]];
                if let Some(inv) = m.try_inverse() {
                    let v = inv * dvector![b[i], b[j]];
                    if (a * &v - b).iter().all(|&r| r <= 1e-9) {
                        let val = c.dot(&v);
                        best = Some(best.map_or(val, |bv: f64| bv.min(val)));
                    }
                }
            }
        }
        best
    }

    fn run(p: &LpProblem) -> SolveReport {
        solve(p, &Tolerances::default())
    }

    #[test]
    fn matches_vertex_enumeration_on_polygon() {
        let a = dmatrix![1.0, 1.0; -1.0, 2.0; 2.0, -1.0; -1.0, -1.0; 0.0, -1.0];
        let b = dvector![4.0, 2.0, 3.0, 1.0, 0.5];
        for c in [dvector![1.0, 0.0], dvector![-1.0, -2.0], dvector![0.3, -1.0], dvector![-1.0, 1.0]] {
            let rep = run(&LpProblem::new(c.clone()).with_ineq(&a, &b));
            assert!(rep.is_optimal());
            let want = vertex_oracle(&c, &a, &b).unwrap();
            assert!((rep.objective - want).abs() < 1e-9, "{} vs {}", rep.objective, want);
        }
    }

    #[test]
    fn detects_infeasible_and_unbounded() {
        let a = dmatrix![1.0, 0.0; -1.0, 0.0];
        let rep = run(&LpProblem::new(dvector![1.0, 0.0]).with_ineq(&a, &dvector![-1.0, -1.0]));
        assert_eq!(rep.status, SolveStatus::Infeasible);
        let rep = run(&LpProblem::new(dvector![0.0, -1.0]).with_ineq(&a, &dvector![1.0, 1.0]));
        assert_eq!(rep.status, SolveStatus::Unbounded);
    }

    #[test]
    fn handles_bounds_and_equalities() {
        // min x + 2y, x + y = 3, 0 ≤ x ≤ 2, y ≤ 5
        let p = LpProblem::new(dvector![1.0, 2.0])
            .with_eq(&dmatrix![1.0, 1.0], &dvector![3.0])
            .with_bounds(vec![(0.0, 2.0), (f64::NEG_INFINITY, 5.0)]);
        let rep = run(&p);
        let x = rep.solution.unwrap();
        assert!((x[0] - 2.0).abs() < 1e-10 && (x[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn degenerate_cube_corner() {
        // Many redundant rows through the optimum vertex.
        let mut a = Vec::new();
        let mut b = Vec::new();
        for k in 0..20 {
            let t = k as f64 / 19.0;
            a.extend_from_slice(&[t, 1.0 - t]);
            b.push(0.0);
        }
        let a = DMatrix::from_row_slice(20, 2, &a);
        let b = DVector::from_vec(b);
        let p = LpProblem::new(dvector![-1.0, -1.0])
            .with_ineq(&a, &b)
            .with_bounds(vec![(-1.0, 1.0), (-1.0, 1.0)]);
        let rep = run(&p);
        assert!(rep.is_optimal());
        assert!(rep.objective.abs() < 1e-10);
    }

    #[test]
    fn agrees_with_sparse_engine() {
        use crate::solvers::{solve_lp_with, LpEngine};
        let a = dmatrix![1.0, 2.0, -1.0; 3.0, -1.0, 2.0; -1.0, -1.0, -1.0; 0.0, 1.0, 4.0];
        let b = dvector![5.0, 7.0, 2.0, 8.0];
        let p = LpProblem::new(dvector![-1.0, -1.0, -1.0])
            .with_ineq(&a, &b)
            .nonnegative();
        let tol = Tolerances::default();
        let d = solve_lp_with(&p, LpEngine::DenseSimplex, &tol);
        let s = solve_lp_with(&p, LpEngine::Sparse, &tol);
        assert!((d.objective - s.objective).abs() < 1e-8);
    }
}
