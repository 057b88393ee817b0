//! Tightened nominal constraint sequences and the terminal invariant set.
//!
//! With `E = 𝔻 ⊕ DŴ_w` the one-step error set and `Φ = A + BK`, the error
//! after `j` steps lives in `Σ_{i<j} Φ^i E`, and the nominal constraints are
//!
//! ```text
//! S̄_1     = {s : FCs ≤ f − η − h_𝔻(FC)}
//! S̄_{j+1} = S̄_j ⊖ Φ^j E
//! Ū_0     = 𝕌,  Ū_i = Ū_{i−1} ⊖ KΦ^{i−1}E
//! ```
//!
//! Every subtrahend is a linear image of a box, so each tightening is a
//! closed-form support evaluation.

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, Box, GeometryError, HPolytope, MappedBox, SupportFunction};
use crate::io;
use crate::solvers::{self, spectral_radius, LpProblem, SolveStatus};

/// Default cap on the maximal RPI iteration.
pub const MRPI_MAX_ITER: usize = 500;
/// Row-wise tolerance for redundancy and convergence tests.
pub const MRPI_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TubeError {
    #[error("{kind} tube is empty at stage {stage}")]
    EmptyTube { kind: &'static str, stage: usize },
    #[error("maximal RPI iteration did not converge in {0} iterations")]
    NoConvergence(usize),
    #[error("terminal set is empty")]
    EmptySet,
    #[error("closed-loop matrix is not Schur stable (spectral radius {0})")]
    Unstable(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Everything the tube construction needs, in lifted coordinates except for
/// the raw constraint rows `F`, `G` and the disturbance box `Ŵ_w`.
#[derive(Debug, Clone)]
pub struct TubeProblem {
    pub phi: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    /// `{x : Fx ≤ f}`.
    pub state_constraints: HPolytope,
    /// `{u : Gu ≤ g}`.
    pub input_constraints: HPolytope,
    /// Per-row backoff of the state constraints.
    pub eta: DVector<f64>,
    /// `𝔻`, lifted dimension.
    pub model_error: Box,
    /// `Ŵ_w`, state dimension.
    pub disturbance: Box,
    pub horizon: usize,
    pub max_iter: usize,
}

impl TubeProblem {
    pub fn n(&self) -> usize {
        self.phi.nrows()
    }

    fn validate(&self) -> Result<(), TubeError> {
        let n = self.n();
        if self.phi.ncols() != n || self.k.ncols() != n || self.c.ncols() != n || self.d.nrows() != n {
            return Err(TubeError::Dimension("lifted dimension"));
        }
        if self.state_constraints.dim() != self.c.nrows() || self.d.ncols() != self.c.nrows() {
            return Err(TubeError::Dimension("state dimension"));
        }
        if self.input_constraints.dim() != self.k.nrows() {
            return Err(TubeError::Dimension("input dimension"));
        }
        if self.eta.len() != self.state_constraints.nrows() {
            return Err(TubeError::Dimension("one backoff per state constraint row"));
        }
        if self.model_error.dim() != n || self.disturbance.dim() != self.c.nrows() {
            return Err(TubeError::Dimension("uncertainty boxes"));
        }
        if self.horizon == 0 {
            return Err(TubeError::Dimension("horizon must be at least 1"));
        }
        let rho = spectral_radius(&self.phi);
        if rho >= 1.0 {
            return Err(TubeError::Unstable(rho));
        }
        Ok(())
    }

    /// `E = 𝔻 ⊕ DŴ_w`.
    pub fn total_error(&self) -> Box {
        geometry::minkowski_sum_boxes(&self.model_error, &geometry::linear_map_box(&self.d, &self.disturbance))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeSet {
    /// `S̄_1 … S̄_N` in lifted coordinates.
    pub state: Vec<HPolytope>,
    /// `Ū_0 … Ū_N`; the last entry only shapes the terminal set.
    pub input: Vec<HPolytope>,
    pub terminal: HPolytope,
    pub eta: DVector<f64>,
    /// Tightening of `S̄_j` beyond `f − η`, per row, `j = 1…N`.
    pub state_tightening: Vec<DVector<f64>>,
    /// Tightening of `Ū_i` relative to `𝕌`, per row, `i = 0…N`.
    pub input_tightening: Vec<DVector<f64>>,
    pub total_error: Box,
    /// `Φ^N E`.
    pub terminal_disturbance: MappedBox,
    pub terminal_iterations: usize,
    #[serde(with = "io::rows")]
    pub phi: DMatrix<f64>,
}

impl TubeSet {
    pub fn horizon(&self) -> usize {
        self.state.len()
    }

    /// Nesting `S̄_{j+1} ⊆ S̄_j`, `Ū_{i+1} ⊆ Ū_i` and `S̄_∞ ⊆ S̄_N`, checked by
    /// support functions row by row.
    pub fn check_nesting(&self, tol: f64) -> Result<bool, TubeError> {
        for seq in [&self.state, &self.input] {
            for w in seq.windows(2) {
                if !subset(&w[1], &w[0], tol)? {
                    return Ok(false);
                }
            }
        }
        let last = self.state.last().expect("horizon ≥ 1");
        subset(&self.terminal, last, tol)
    }
}

/// `inner ⊆ outer` via `h_inner(row) ≤ b_row` for every row of `outer`.
pub fn subset(inner: &HPolytope, outer: &HPolytope, tol: f64) -> Result<bool, TubeError> {
    for r in 0..outer.nrows() {
        match inner.support(&outer.h.row(r).transpose()) {
            Ok(v) if v <= outer.b[r] + tol => {}
            Ok(_) | Err(GeometryError::Unbounded) => return Ok(false),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

/// Builds an H-polytope, dropping all-zero rows that hold trivially.
fn polytope_from_rows(h: DMatrix<f64>, b: DVector<f64>) -> Result<Option<HPolytope>, TubeError> {
    let mut keep = Vec::new();
    for r in 0..h.nrows() {
        if h.row(r).amax() == 0.0 {
            if b[r] < -MRPI_TOL {
                return Err(TubeError::EmptySet);
            }
        } else {
            keep.push(r);
        }
    }
    if keep.is_empty() {
        return Ok(None);
    }
    Ok(Some(HPolytope { h, b }.select_rows(&keep)))
}

fn ensure_nonempty(p: &HPolytope, kind: &'static str, stage: usize) -> Result<(), TubeError> {
    if p.is_empty()? {
        return Err(TubeError::EmptyTube { kind, stage });
    }
    Ok(())
}

/// `S̄_1 … S̄_N` and the per-row tightening beyond `f − η`.
pub fn build_state_tube(p: &TubeProblem) -> Result<(Vec<HPolytope>, Vec<DVector<f64>>), TubeError> {
    p.validate()?;
    let rows = &p.state_constraints.h * &p.c;
    let e = p.total_error();
    let mut tightening: DVector<f64> =
        DVector::from_iterator(rows.nrows(), (0..rows.nrows()).map(|r| p.model_error.support(&rows.row(r).transpose()).unwrap()));
    let mut sets = Vec::with_capacity(p.horizon);
    let mut tightenings = Vec::with_capacity(p.horizon);
    let mut phi_j = DMatrix::identity(p.n(), p.n());
    for j in 1..=p.horizon {
        if j > 1 {
            let incr = MappedBox::new(phi_j.clone(), e.clone())?;
            for r in 0..rows.nrows() {
                tightening[r] += incr.support(&rows.row(r).transpose())?;
            }
        }
        let b = &p.state_constraints.b - &p.eta - &tightening;
        let set = HPolytope::new(rows.clone(), b)?;
        ensure_nonempty(&set, "state", j)?;
        sets.push(set);
        tightenings.push(tightening.clone());
        phi_j = &p.phi * phi_j;
    }
    Ok((sets, tightenings))
}

/// `Ū_0 … Ū_N` and the per-row tightening relative to `𝕌`.
pub fn build_input_tube(p: &TubeProblem) -> Result<(Vec<HPolytope>, Vec<DVector<f64>>), TubeError> {
    p.validate()?;
    let g = &p.input_constraints;
    let e = p.total_error();
    let mut tightening = DVector::zeros(g.nrows());
    let mut sets = vec![g.clone()];
    let mut tightenings = vec![tightening.clone()];
    let mut k_phi = p.k.clone();
    for i in 1..=p.horizon {
        let image = MappedBox::new(k_phi.clone(), e.clone())?;
        tightening += g.row_supports(&image)?;
        let set = g.tighten(&tightening);
        ensure_nonempty(&set, "input", i)?;
        sets.push(set);
        tightenings.push(tightening.clone());
        k_phi *= &p.phi;
    }
    Ok((sets, tightenings))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalSet {
    pub set: HPolytope,
    pub iterations: usize,
}

/// Maximal RPI subset of `omega0` for `s⁺ = Φs + w`, `w ∈ w_set`.
///
/// Iterates `Ω_{k+1} = Ω_k ∩ pre(Ω_k)`. With `Ω_0 = {Hs ≤ h}` the rows added
/// at step `k` are `HΦ^k s ≤ h − Σ_{i<k} h_W((Φ^i)ᵀH)`; only rows not
/// already implied are kept, and the iteration stops when every new row is
/// redundant.
pub fn terminal_set<W: SupportFunction + ?Sized>(
    omega0: &HPolytope,
    phi: &DMatrix<f64>,
    w_set: &W,
    max_iter: usize,
) -> Result<TerminalSet, TubeError> {
    let n = omega0.dim();
    if phi.shape() != (n, n) || w_set.dim() != n {
        return Err(TubeError::Dimension("terminal set"));
    }
    let rho = spectral_radius(phi);
    if rho >= 1.0 {
        return Err(TubeError::Unstable(rho));
    }
    if omega0.is_empty()? {
        return Err(TubeError::EmptySet);
    }
    let m = omega0.nrows();
    let mut current = omega0.clone();
    let mut offset = DVector::zeros(m);
    let mut phi_k = DMatrix::identity(n, n);
    for k in 1..=max_iter {
        for r in 0..m {
            offset[r] += w_set.support(&(phi_k.transpose() * omega0.h.row(r).transpose()))?;
        }
        phi_k = phi * phi_k;
        let cand_h = &omega0.h * &phi_k;
        let cand_b = &omega0.b - &offset;
        let mut added: Vec<(DVector<f64>, f64)> = Vec::new();
        for r in 0..m {
            let row = cand_h.row(r).transpose();
            let scale = row.amax();
            if scale <= f64::EPSILON * omega0.h.row(r).amax() {
                if cand_b[r] < -MRPI_TOL {
                    return Err(TubeError::EmptySet);
                }
                continue;
            }
            let (row, rhs) = (row / scale, cand_b[r] / scale);
            match current.support(&row) {
                Ok(v) if v <= rhs + MRPI_TOL => {}
                Ok(_) | Err(GeometryError::Unbounded) => added.push((row, rhs)),
                Err(GeometryError::Infeasible) => return Err(TubeError::EmptySet),
                Err(e) => return Err(e.into()),
            }
        }
        if added.is_empty() {
            let set = current.remove_redundant(MRPI_TOL)?;
            info!("maximal RPI set converged after {k} iterations with {} rows", set.nrows());
            return Ok(TerminalSet { set, iterations: k });
        }
        let h = DMatrix::from_fn(added.len(), n, |i, j| added[i].0[j]);
        let b = DVector::from_iterator(added.len(), added.iter().map(|a| a.1));
        current = current.intersect(&HPolytope { h, b })?;
        if current.is_empty()? {
            return Err(TubeError::EmptySet);
        }
        debug!("MRPI iteration {k}: {} rows", current.nrows());
    }
    warn!(
        "maximal RPI iteration stopped at {max_iter} iterations; last iterate has {} rows and is not invariant",
        current.nrows()
    );
    Err(TubeError::NoConvergence(max_iter))
}

/// Full construction: both tubes, `Φ^N E`, and the terminal set
/// `S̄_∞ ⊆ S̄_N ∩ {GKs ≤ g_N}`.
pub fn build_tubes(p: &TubeProblem) -> Result<TubeSet, TubeError> {
    let (state, state_tightening) = build_state_tube(p)?;
    let (input, input_tightening) = build_input_tube(p)?;
    let e = p.total_error();
    let phi_n = p.phi.pow(p.horizon as u32);
    let w_term = MappedBox::new(phi_n, e.clone())?;
    let s_n = state.last().expect("horizon ≥ 1");
    let u_n = input.last().expect("horizon ≥ 1");
    let omega0 = match polytope_from_rows(&u_n.h * &p.k, u_n.b.clone())? {
        Some(input_rows) => s_n.intersect(&input_rows)?,
        None => s_n.clone(),
    };
    let term = terminal_set(&omega0, &p.phi, &w_term, p.max_iter)?;
    Ok(TubeSet {
        state,
        input,
        terminal: term.set,
        eta: p.eta.clone(),
        state_tightening,
        input_tightening,
        total_error: e,
        terminal_disturbance: w_term,
        terminal_iterations: term.iterations,
        phi: p.phi.clone(),
    })
}

/// Box bounding `C·Σ_{i≥0} Φ^i E` coordinatewise; the sum is exact per
/// direction and truncated once the increments fall below `1e-15`.
pub fn error_limit_box(phi: &DMatrix<f64>, e: &Box, c: &DMatrix<f64>) -> Result<Box, TubeError> {
    let rho = spectral_radius(phi);
    if rho >= 1.0 {
        return Err(TubeError::Unstable(rho));
    }
    let nx = c.nrows();
    let mut lo = DVector::zeros(nx);
    let mut hi = DVector::zeros(nx);
    for k in 0..nx {
        let mut dir = c.row(k).transpose();
        for _ in 0..100_000 {
            let up = e.support(&dir)?;
            let down = e.support(&(-&dir))?;
            hi[k] += up;
            lo[k] -= down;
            if up.abs().max(down.abs()) < 1e-15 && dir.amax() < 1e-15 {
                break;
            }
            dir = phi.transpose() * dir;
        }
    }
    Ok(Box::from_bounds(&lo, &hi)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMethod {
    Rejection,
    HitAndRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub samples: usize,
    pub violations: usize,
    /// Largest row violation of `Φs ⊕ W` seen.
    pub max_violation: f64,
    pub method: SamplingMethod,
}

/// Samples points of `omega` and checks `Φs ⊕ W ⊆ Ω` for each. The worst
/// disturbance per row is a support evaluation, which equals testing every
/// vertex of a box disturbance set.
pub fn verify_invariance<W: SupportFunction + ?Sized, R: Rng + ?Sized>(
    omega: &HPolytope,
    phi: &DMatrix<f64>,
    w_set: &W,
    n_samples: usize,
    rng: &mut R,
) -> Result<InvarianceReport, TubeError> {
    let n = omega.dim();
    if phi.shape() != (n, n) || w_set.dim() != n {
        return Err(TubeError::Dimension("invariance check"));
    }
    let w_supp = omega.row_supports(w_set)?;
    let (points, method) = sample_polytope(omega, n_samples, rng)?;
    let mut violations = 0;
    let mut max_violation = f64::NEG_INFINITY;
    for s in &points {
        let worst = (&omega.h * (phi * s) + &w_supp - &omega.b).max();
        max_violation = max_violation.max(worst);
        if worst > 1e-7 {
            violations += 1;
        }
    }
    Ok(InvarianceReport { samples: points.len(), violations, max_violation, method })
}

/// Bounding box of a polytope; unbounded directions are capped at `±cap`.
fn bounding_box(p: &HPolytope, cap: f64) -> Result<(DVector<f64>, DVector<f64>), TubeError> {
    let n = p.dim();
    let mut lo = DVector::zeros(n);
    let mut hi = DVector::zeros(n);
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        hi[i] = match p.support(&e) {
            Ok(v) => v.min(cap),
            Err(GeometryError::Unbounded) => cap,
            Err(err) => return Err(err.into()),
        };
        lo[i] = match p.support(&(-e)) {
            Ok(v) => (-v).max(-cap),
            Err(GeometryError::Unbounded) => -cap,
            Err(err) => return Err(err.into()),
        };
    }
    Ok((lo, hi))
}

/// Chebyshev-style interior point: maximize `r` with `Hx + ‖h_i‖r ≤ b`, `r ≤ 1`.
fn interior_point(p: &HPolytope, lo: &DVector<f64>, hi: &DVector<f64>) -> Result<DVector<f64>, TubeError> {
    let n = p.dim();
    let mut cost = DVector::zeros(n + 1);
    cost[n] = -1.0;
    let mut lp = LpProblem::new(cost);
    for r in 0..p.nrows() {
        let mut coeffs: Vec<(usize, f64)> = (0..n).map(|j| (j, p.h[(r, j)])).collect();
        coeffs.push((n, p.h.row(r).norm()));
        lp.push_le(coeffs, p.b[r]);
    }
    let mut bounds: Vec<(f64, f64)> = (0..n).map(|j| (lo[j], hi[j])).collect();
    bounds.push((0.0, 1.0));
    let lp = lp.with_bounds(bounds);
    let report = solvers::solve_lp(&lp);
    match report.status {
        SolveStatus::Optimal => Ok(report.solution.expect("optimal").rows(0, n).into_owned()),
        _ => Err(TubeError::EmptySet),
    }
}

/// Uniform rejection sampling from the bounding box, falling back to
/// hit-and-run when the acceptance rate is too low.
pub fn sample_polytope<R: Rng + ?Sized>(
    p: &HPolytope,
    n_samples: usize,
    rng: &mut R,
) -> Result<(Vec<DVector<f64>>, SamplingMethod), TubeError> {
    let n = p.dim();
    let (lo, hi) = bounding_box(p, 1e3)?;
    let mut out = Vec::with_capacity(n_samples);
    let budget = 50 * n_samples.max(1);
    for _ in 0..budget {
        let x = DVector::from_fn(n, |i, _| if hi[i] > lo[i] { rng.gen_range(lo[i]..=hi[i]) } else { lo[i] });
        if p.contains(&x, 0.0) {
            out.push(x);
            if out.len() == n_samples {
                return Ok((out, SamplingMethod::Rejection));
            }
        }
    }
    debug!("rejection sampling accepted {} of {budget}; switching to hit-and-run", out.len());
    out.clear();
    let mut x = interior_point(p, &lo, &hi)?;
    let thin = 5 * n;
    while out.len() < n_samples {
        for _ in 0..thin {
            let d = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let (mut t_lo, mut t_hi) = (f64::NEG_INFINITY, f64::INFINITY);
            let hd = &p.h * &d;
            let slack = &p.b - &p.h * &x;
            for r in 0..p.nrows() {
                chord(hd[r], slack[r].max(0.0), &mut t_lo, &mut t_hi);
            }
            for i in 0..n {
                chord(d[i], (hi[i] - x[i]).max(0.0), &mut t_lo, &mut t_hi);
                chord(-d[i], (x[i] - lo[i]).max(0.0), &mut t_lo, &mut t_hi);
            }
            if t_hi > t_lo {
                x += d * rng.gen_range(t_lo..=t_hi);
            }
        }
        out.push(x.clone());
    }
    Ok((out, SamplingMethod::HitAndRun))
}

/// Intersect `[t_lo, t_hi]` with `{t : a·t ≤ s}`.
fn chord(a: f64, s: f64, t_lo: &mut f64, t_hi: &mut f64) {
    if a > 1e-300 {
        *t_hi = t_hi.min(s / a);
    } else if a < -1e-300 {
        *t_lo = t_lo.max(s / a);
    }
}
