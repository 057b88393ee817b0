//! Polyhedral and box set arithmetic.
//!
//! Uncertainty sets are axis-aligned boxes, which keeps every tightening in
//! closed form: the support function of a box is `c·a + Σ|a_i|·r_i`, and the
//! support of a linear image `M·B` is the support of `B` in direction `Mᵀa`.
//! General H-polytopes are used for state/input constraint sets; their support
//! function needs an LP.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::solvers::{self, LpProblem, SolveStatus};

/// Absolute membership tolerance.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("row {0} of the constraint matrix is all zero")]
    ZeroRow(usize),
    #[error("polytope needs at least one row and one column")]
    Degenerate,
    #[error("negative halfwidth {value} in coordinate {coord}")]
    NegativeHalfwidth { coord: usize, value: f64 },
    #[error("support LP unbounded in the requested direction")]
    Unbounded,
    #[error("set is empty")]
    Infeasible,
    #[error("Pontryagin difference is empty (over-tightened)")]
    EmptyResult,
    #[error("LP solver failed: {0}")]
    Solver(String),
}

/// Anything with a support function `h(a) = sup_{x∈S} a·x`.
pub trait SupportFunction {
    fn dim(&self) -> usize;
    fn support(&self, direction: &DVector<f64>) -> Result<f64, GeometryError>;
}

/// Axis-aligned box `{x : |x_i − c_i| ≤ r_i}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub center: DVector<f64>,
    pub halfwidth: DVector<f64>,
}

impl Box {
    pub fn new(center: DVector<f64>, halfwidth: DVector<f64>) -> Result<Self, GeometryError> {
        if center.len() != halfwidth.len() {
            return Err(GeometryError::DimensionMismatch {
                expected: center.len(),
                got: halfwidth.len(),
            });
        }
        if center.is_empty() {
            return Err(GeometryError::Degenerate);
        }
        for (i, &r) in halfwidth.iter().enumerate() {
            if !(r >= 0.0) {
                return Err(GeometryError::NegativeHalfwidth { coord: i, value: r });
            }
        }
        Ok(Self { center, halfwidth })
    }

    /// Box from componentwise bounds `lo ≤ x ≤ hi`.
    pub fn from_bounds(lo: &DVector<f64>, hi: &DVector<f64>) -> Result<Self, GeometryError> {
        if lo.len() != hi.len() {
            return Err(GeometryError::DimensionMismatch { expected: lo.len(), got: hi.len() });
        }
        let center = (lo + hi) * 0.5;
        let mut halfwidth = (hi - lo) * 0.5;
        // Round outward so the stored box contains both bounds exactly.
        for i in 0..lo.len() {
            while halfwidth[i].is_finite() && (center[i] - halfwidth[i] > lo[i] || center[i] + halfwidth[i] < hi[i]) {
                halfwidth[i] = halfwidth[i].next_up();
            }
        }
        Self::new(center, halfwidth)
    }

    pub fn zero(n: usize) -> Self {
        Self { center: DVector::zeros(n), halfwidth: DVector::zeros(n) }
    }

    /// Symmetric box `[−r, r]ⁿ` around the origin.
    pub fn symmetric(halfwidth: DVector<f64>) -> Result<Self, GeometryError> {
        Self::new(DVector::zeros(halfwidth.len()), halfwidth)
    }

    /// Componentwise hull of a non-empty point set.
    pub fn hull<'a, I>(points: I) -> Option<Self>
    where
        I: IntoIterator<Item = &'a DVector<f64>>,
    {
        let mut iter = points.into_iter();
        let first = iter.next()?;
        let mut lo = first.clone();
        let mut hi = first.clone();
        for p in iter {
            for i in 0..lo.len() {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        Self::from_bounds(&lo, &hi).ok()
    }

    pub fn lower(&self) -> DVector<f64> {
        &self.center - &self.halfwidth
    }

    pub fn upper(&self) -> DVector<f64> {
        &self.center + &self.halfwidth
    }

    /// Grow every side by `margin`.
    pub fn inflate(&self, margin: f64) -> Self {
        Self {
            center: self.center.clone(),
            halfwidth: self.halfwidth.map(|r| r + margin),
        }
    }

    /// Smallest box containing both `self` and the point `p`.
    pub fn expand_to(&self, p: &DVector<f64>) -> Self {
        let lo = self.lower().zip_map(p, f64::min);
        let hi = self.upper().zip_map(p, f64::max);
        Self::from_bounds(&lo, &hi).expect("hull of valid bounds")
    }

    /// Embed into a higher dimension via `D = [I; 0]` (zero extent in the new coordinates).
    pub fn embed(&self, n: usize) -> Self {
        let mut c = DVector::zeros(n);
        let mut r = DVector::zeros(n);
        let k = self.center.len().min(n);
        c.rows_mut(0, k).copy_from(&self.center.rows(0, k));
        r.rows_mut(0, k).copy_from(&self.halfwidth.rows(0, k));
        Self { center: c, halfwidth: r }
    }

    pub fn vertices(&self) -> Vec<DVector<f64>> {
        let n = self.center.len();
        let active: Vec<usize> = (0..n).filter(|&i| self.halfwidth[i] > 0.0).collect();
        let count = 1usize << active.len();
        (0..count)
            .map(|mask| {
                let mut v = self.center.clone();
                for (bit, &i) in active.iter().enumerate() {
                    let sign = if mask >> bit & 1 == 1 { 1.0 } else { -1.0 };
                    v[i] += sign * self.halfwidth[i];
                }
                v
            })
            .collect()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.len() == self.center.len()
            && (0..x.len()).all(|i| (x[i] - self.center[i]).abs() <= self.halfwidth[i] + tol)
    }

    pub fn to_hpolytope(&self) -> HPolytope {
        let n = self.center.len();
        let mut h = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for i in 0..n {
            h[(2 * i, i)] = 1.0;
            b[2 * i] = self.center[i] + self.halfwidth[i];
            h[(2 * i + 1, i)] = -1.0;
            b[2 * i + 1] = -(self.center[i] - self.halfwidth[i]);
        }
        HPolytope { h, b }
    }

    fn support_unchecked(&self, a: &DVector<f64>) -> f64 {
        a.dot(&self.center) + a.abs().dot(&self.halfwidth)
    }
}

impl SupportFunction for Box {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn support(&self, direction: &DVector<f64>) -> Result<f64, GeometryError> {
        check_dim(self.dim(), direction.len())?;
        Ok(self.support_unchecked(direction))
    }
}

/// Linear image `{M·x : x ∈ base}` of a box, kept exact rather than boxed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappedBox {
    pub map: DMatrix<f64>,
    pub base: Box,
}

impl MappedBox {
    pub fn new(map: DMatrix<f64>, base: Box) -> Result<Self, GeometryError> {
        check_dim(map.ncols(), base.dim())?;
        Ok(Self { map, base })
    }

    pub fn bounding_box(&self) -> Box {
        linear_map_box(&self.map, &self.base)
    }

    pub fn vertices(&self) -> Vec<DVector<f64>> {
        self.base.vertices().into_iter().map(|v| &self.map * v).collect()
    }
}

impl SupportFunction for MappedBox {
    fn dim(&self) -> usize {
        self.map.nrows()
    }

    fn support(&self, direction: &DVector<f64>) -> Result<f64, GeometryError> {
        check_dim(self.dim(), direction.len())?;
        Ok(self.base.support_unchecked(&(self.map.transpose() * direction)))
    }
}

/// `{x : Hx ≤ b}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HPolytope {
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl HPolytope {
    pub fn new(h: DMatrix<f64>, b: DVector<f64>) -> Result<Self, GeometryError> {
        if h.nrows() == 0 || h.ncols() == 0 {
            return Err(GeometryError::Degenerate);
        }
        check_dim(h.nrows(), b.len())?;
        for i in 0..h.nrows() {
            if h.row(i).iter().all(|&v| v == 0.0) {
                return Err(GeometryError::ZeroRow(i));
            }
        }
        Ok(Self { h, b })
    }

    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.h.nrows()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.len() == self.dim() && (&self.h * x - &self.b).iter().all(|&v| v <= tol)
    }

    /// Largest constraint violation `max_i (Hx − b)_i` (negative inside).
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        (&self.h * x - &self.b).max()
    }

    /// Stack the rows of two polytopes of equal dimension.
    pub fn intersect(&self, other: &HPolytope) -> Result<HPolytope, GeometryError> {
        check_dim(self.dim(), other.dim())?;
        let m = self.nrows() + other.nrows();
        let mut h = DMatrix::zeros(m, self.dim());
        h.rows_mut(0, self.nrows()).copy_from(&self.h);
        h.rows_mut(self.nrows(), other.nrows()).copy_from(&other.h);
        let mut b = DVector::zeros(m);
        b.rows_mut(0, self.nrows()).copy_from(&self.b);
        b.rows_mut(self.nrows(), other.nrows()).copy_from(&other.b);
        Ok(HPolytope { h, b })
    }

    /// Feasibility check by phase-one LP.
    pub fn is_empty(&self) -> Result<bool, GeometryError> {
        let lp = LpProblem::new(DVector::zeros(self.dim()))
            .with_ineq(&self.h, &self.b)
            .free_vars();
        let report = solvers::solve_lp(&lp);
        match report.status {
            SolveStatus::Optimal => Ok(false),
            SolveStatus::Infeasible => Ok(true),
            other => Err(GeometryError::Solver(format!("feasibility LP ended with {other:?}"))),
        }
    }

    /// Maximizer of `a·x` over the set together with the value.
    pub fn support_point(&self, a: &DVector<f64>) -> Result<(f64, DVector<f64>), GeometryError> {
        check_dim(self.dim(), a.len())?;
        let lp = LpProblem::new(-a.clone()).with_ineq(&self.h, &self.b).free_vars();
        let report = solvers::solve_lp(&lp);
        match report.status {
            SolveStatus::Optimal => {
                let x = report.solution.expect("optimal report carries a solution");
                Ok((a.dot(&x), x))
            }
            SolveStatus::Unbounded => Err(GeometryError::Unbounded),
            SolveStatus::Infeasible => Err(GeometryError::Infeasible),
            SolveStatus::MaxIter => Err(GeometryError::Solver("support LP hit the iteration limit".into())),
        }
    }

    /// Drop rows implied by the others (LP per row).
    pub fn remove_redundant(&self, tol: f64) -> Result<HPolytope, GeometryError> {
        let m = self.nrows();
        let mut keep = vec![true; m];
        for i in 0..m {
            let others: Vec<usize> = (0..m).filter(|&j| j != i && keep[j]).collect();
            if others.is_empty() {
                continue;
            }
            let sub = self.select_rows(&others);
            let row = self.h.row(i).transpose();
            match sub.support(&row) {
                Ok(v) if v <= self.b[i] + tol => keep[i] = false,
                Ok(_) | Err(GeometryError::Unbounded) => {}
                Err(e) => return Err(e),
            }
        }
        let idx: Vec<usize> = (0..m).filter(|&i| keep[i]).collect();
        Ok(self.select_rows(&idx))
    }

    pub fn select_rows(&self, idx: &[usize]) -> HPolytope {
        let h = DMatrix::from_fn(idx.len(), self.dim(), |r, c| self.h[(idx[r], c)]);
        let b = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.b[i]));
        HPolytope { h, b }
    }

    /// Row-wise support of `other` along this polytope's rows.
    pub fn row_supports<S: SupportFunction + ?Sized>(&self, other: &S) -> Result<DVector<f64>, GeometryError> {
        check_dim(self.dim(), other.dim())?;
        let mut out = DVector::zeros(self.nrows());
        for i in 0..self.nrows() {
            out[i] = other.support(&self.h.row(i).transpose())?;
        }
        Ok(out)
    }

    /// Move every right-hand side down by `amount`.
    pub fn tighten(&self, amount: &DVector<f64>) -> HPolytope {
        HPolytope { h: self.h.clone(), b: &self.b - amount }
    }
}

impl SupportFunction for HPolytope {
    fn dim(&self) -> usize {
        self.h.ncols()
    }

    fn support(&self, direction: &DVector<f64>) -> Result<f64, GeometryError> {
        self.support_point(direction).map(|(v, _)| v)
    }
}

fn check_dim(expected: usize, got: usize) -> Result<(), GeometryError> {
    if expected == got {
        Ok(())
    } else {
        Err(GeometryError::DimensionMismatch { expected, got })
    }
}

/// Support function of a box or polytope.
pub fn support<S: SupportFunction + ?Sized>(set: &S, direction: &DVector<f64>) -> Result<f64, GeometryError> {
    set.support(direction)
}

/// Tightest axis-aligned box containing `{M x : x ∈ b}`.
pub fn linear_map_box(m: &DMatrix<f64>, b: &Box) -> Box {
    assert_eq!(m.ncols(), b.dim(), "linear_map_box: map columns must match box dimension");
    Box {
        center: m * &b.center,
        halfwidth: m.abs() * &b.halfwidth,
    }
}

/// `p ⊖ S = {x : Hx ≤ b − η}` with `η_l = h_S(H_l)`; exact for convex `S`.
pub fn pontryagin_diff<S: SupportFunction + ?Sized>(p: &HPolytope, s: &S) -> Result<HPolytope, GeometryError> {
    let eta = p.row_supports(s)?;
    let out = p.tighten(&eta);
    if out.is_empty()? {
        return Err(GeometryError::EmptyResult);
    }
    Ok(out)
}

/// `p ⊖ b` for a box subtrahend.
pub fn pontryagin_diff_box(p: &HPolytope, b: &Box) -> Result<HPolytope, GeometryError> {
    pontryagin_diff(p, b)
}

/// Box ⊖ box, reported per coordinate. Coordinates whose halfwidth would go
/// negative are returned separately so the caller decides how to treat them.
pub fn box_pontryagin_diff(a: &Box, b: &Box) -> Result<(Box, Vec<usize>), GeometryError> {
    check_dim(a.dim(), b.dim())?;
    let mut center = &a.center - &b.center;
    let mut halfwidth = &a.halfwidth - &b.halfwidth;
    let mut negative = Vec::new();
    for i in 0..a.dim() {
        if halfwidth[i] < 0.0 {
            negative.push(i);
            halfwidth[i] = 0.0;
            center[i] = 0.0;
        }
    }
    Ok((Box { center, halfwidth }, negative))
}

pub fn minkowski_sum_boxes(a: &Box, b: &Box) -> Box {
    assert_eq!(a.dim(), b.dim(), "minkowski_sum_boxes: dimension mismatch");
    Box {
        center: &a.center + &b.center,
        halfwidth: &a.halfwidth + &b.halfwidth,
    }
}

/// Membership with the default tolerance.
pub fn contains(set: &HPolytope, point: &DVector<f64>) -> bool {
    set.contains(point, MEMBERSHIP_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn unit_square() -> HPolytope {
        Box::symmetric(dvector![1.0, 1.0]).unwrap().to_hpolytope()
    }

    // Vertices of a 2-D polytope by intersecting every pair of rows.
    fn vertices_2d(p: &HPolytope) -> Vec<DVector<f64>> {
        let mut out = Vec::new();
        for i in 0..p.nrows() {
            for j in i + 1..p.nrows() {
                let m = dmatrix![p.h[(i, 0)], p.h[(i, 1)]; p.h[(j, 0)], p.h[(j, 1)]];
                if m.determinant().abs() < 1e-12 {
                    continue;
                }
                let v = m.try_inverse().unwrap() * dvector![p.b[i], p.b[j]];
                if p.contains(&v, 1e-9) {
                    out.push(v);
                }
            }
        }
        out
    }

    #[test]
    fn box_support_closed_form() {
        let b = Box::symmetric(dvector![1.0, 1.0]).unwrap();
        assert_eq!(support(&b, &dvector![1.0, 0.0]).unwrap(), 1.0);
        let b = Box::new(dvector![0.5, 0.0], dvector![0.2, 0.3]).unwrap();
        assert_abs_diff_eq!(support(&b, &dvector![1.0, 1.0]).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn polytope_support_matches_vertex_enumeration() {
        let sq = unit_square();
        let a = dvector![1.0, 1.0];
        let lp = support(&sq, &a).unwrap();
        let oracle = vertices_2d(&sq).iter().map(|v| v.dot(&a)).fold(f64::MIN, f64::max);
        assert_abs_diff_eq!(lp, 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(lp, oracle, epsilon = 1e-9);
    }

    #[test]
    fn support_errors() {
        let half = HPolytope::new(dmatrix![1.0, 0.0], dvector![1.0]).unwrap();
        assert_eq!(support(&half, &dvector![-1.0, 0.0]), Err(GeometryError::Unbounded));
        let empty = HPolytope::new(dmatrix![1.0; -1.0], dvector![-1.0, -1.0]).unwrap();
        assert_eq!(support(&empty, &dvector![1.0]), Err(GeometryError::Infeasible));
        assert!(empty.is_empty().unwrap());
    }

    #[test]
    fn rejects_zero_rows() {
        assert_eq!(
            HPolytope::new(dmatrix![0.0, 0.0], dvector![1.0]),
            Err(GeometryError::ZeroRow(0))
        );
    }

    #[test]
    fn linear_map_identity_and_scaling() {
        let b = Box::new(dvector![0.3, -0.2], dvector![1.0, 0.5]).unwrap();
        assert_eq!(linear_map_box(&DMatrix::identity(2, 2), &b), b);
        let u = Box::symmetric(dvector![1.0, 1.0]).unwrap();
        let s = linear_map_box(&(DMatrix::identity(2, 2) * 2.0), &u);
        assert_eq!(s.halfwidth, dvector![2.0, 2.0]);
    }

    #[test]
    fn linear_map_matches_mapped_vertices() {
        let m = dmatrix![0.7, -1.3; 0.4, 2.1];
        let u = Box::symmetric(dvector![1.0, 1.0]).unwrap();
        let got = linear_map_box(&m, &u);
        let mapped: Vec<_> = u.vertices().into_iter().map(|v| &m * v).collect();
        let oracle = Box::hull(mapped.iter()).unwrap();
        assert_abs_diff_eq!(got.lower(), oracle.lower(), epsilon = 1e-12);
        assert_abs_diff_eq!(got.upper(), oracle.upper(), epsilon = 1e-12);
    }

    #[test]
    fn pontryagin_with_singleton_and_box() {
        let sq = unit_square();
        let same = pontryagin_diff_box(&sq, &Box::zero(2)).unwrap();
        assert_eq!(same, sq);
        let shrunk = pontryagin_diff_box(&sq, &Box::symmetric(dvector![0.2, 0.2]).unwrap()).unwrap();
        let expect = Box::symmetric(dvector![0.8, 0.8]).unwrap().to_hpolytope();
        assert_abs_diff_eq!(shrunk.b, expect.b, epsilon = 1e-7);
    }

    #[test]
    fn pontryagin_triangle_against_vertex_oracle() {
        let tri = HPolytope::new(dmatrix![1.0, 1.0; -1.0, 0.0; 0.0, -1.0], dvector![1.0, 0.0, 0.0]).unwrap();
        let b = Box::symmetric(dvector![0.1, 0.1]).unwrap();
        let diff = pontryagin_diff_box(&tri, &b).unwrap();
        assert_abs_diff_eq!(&tri.b - &diff.b, dvector![0.2, 0.1, 0.1], epsilon = 1e-12);
        let verts = b.vertices();
        for i in 0..=40 {
            for j in 0..=40 {
                let x = dvector![-0.2 + i as f64 * 0.03, -0.2 + j as f64 * 0.03];
                let oracle = verts.iter().all(|v| tri.contains(&(&x + v), 1e-12));
                assert_eq!(diff.contains(&x, 1e-12), oracle, "point {x:?}");
            }
        }
    }

    #[test]
    fn pontryagin_flags_empty_result() {
        let sq = unit_square();
        let big = Box::symmetric(dvector![1.5, 0.1]).unwrap();
        assert_eq!(pontryagin_diff_box(&sq, &big), Err(GeometryError::EmptyResult));
    }

    #[test]
    fn minkowski_basics_and_grid_oracle() {
        let a = Box::new(dvector![0.0], dvector![1.0]).unwrap();
        assert_eq!(minkowski_sum_boxes(&a, &Box::zero(1)), a);
        let b = Box::new(dvector![0.0], dvector![2.0]).unwrap();
        assert_eq!(minkowski_sum_boxes(&a, &b).halfwidth, dvector![3.0]);

        let a = Box::new(dvector![0.2, -0.1], dvector![0.3, 0.2]).unwrap();
        let b = Box::new(dvector![-0.1, 0.4], dvector![0.1, 0.25]).unwrap();
        let s = minkowski_sum_boxes(&a, &b);
        // x ∈ a ⊕ b iff some split x = p + q with p ∈ a, q ∈ b; search q on a grid.
        for i in 0..=20 {
            for j in 0..=20 {
                let x = dvector![-0.5 + i as f64 * 0.06, -0.5 + j as f64 * 0.08];
                let mut found = false;
                for qi in 0..=50 {
                    for qj in 0..=50 {
                        let q = dvector![
                            b.center[0] - b.halfwidth[0] + qi as f64 * 2.0 * b.halfwidth[0] / 50.0,
                            b.center[1] - b.halfwidth[1] + qj as f64 * 2.0 * b.halfwidth[1] / 50.0
                        ];
                        if a.contains(&(&x - &q), 0.01) {
                            found = true;
                        }
                    }
                }
                if s.contains(&x, -0.011) {
                    assert!(found, "interior point {x:?} has no split");
                }
                if !s.contains(&x, 0.011) {
                    assert!(!found, "exterior point {x:?} has a split");
                }
            }
        }
    }

    #[test]
    fn membership_tolerance() {
        let sq = unit_square();
        assert!(contains(&sq, &dvector![0.0, 0.0]));
        assert!(!contains(&sq, &dvector![1.0 + 2.0 * MEMBERSHIP_TOL, 0.0]));
        assert!(contains(&sq, &dvector![1.0 + 0.5 * MEMBERSHIP_TOL, 0.0]));
    }

    #[test]
    fn mapped_box_support_is_exact() {
        let m = dmatrix![0.5, 0.5; -0.5, 0.5];
        let b = Box::symmetric(dvector![1.0, 1.0]).unwrap();
        let img = MappedBox::new(m.clone(), b.clone()).unwrap();
        let a = dvector![1.0, 0.0];
        let oracle = img.vertices().iter().map(|v| v.dot(&a)).fold(f64::MIN, f64::max);
        assert_abs_diff_eq!(img.support(&a).unwrap(), oracle, epsilon = 1e-12);
        assert!(img.support(&a).unwrap() <= img.bounding_box().support(&a).unwrap() + 1e-12);
    }

    #[test]
    fn remove_redundant_drops_implied_rows() {
        let p = HPolytope::new(
            dmatrix![1.0, 0.0; -1.0, 0.0; 0.0, 1.0; 0.0, -1.0; 1.0, 1.0],
            dvector![1.0, 1.0, 1.0, 1.0, 5.0],
        )
        .unwrap();
        assert_eq!(p.remove_redundant(1e-9).unwrap().nrows(), 4);
    }

    fn arb_box() -> impl Strategy<Value = Box> {
        (prop::collection::vec(-2.0..2.0f64, 2), prop::collection::vec(0.0..1.5f64, 2))
            .prop_map(|(c, r)| Box::new(DVector::from_vec(c), DVector::from_vec(r)).unwrap())
    }

    proptest! {
        #[test]
        fn width_is_nonnegative(b in arb_box(), a in prop::collection::vec(-3.0..3.0f64, 2)) {
            let a = DVector::from_vec(a);
            prop_assert!(support(&b, &a).unwrap() + support(&b, &-a.clone()).unwrap() >= -1e-12);
        }

        #[test]
        fn support_is_additive_under_minkowski(a in arb_box(), b in arb_box(), d in prop::collection::vec(-3.0..3.0f64, 2)) {
            let d = DVector::from_vec(d);
            let lhs = support(&minkowski_sum_boxes(&a, &b), &d).unwrap();
            let rhs = support(&a, &d).unwrap() + support(&b, &d).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn pontryagin_then_sum_stays_inside(b in arb_box(), px in prop::collection::vec(0.0..1.0f64, 2), py in prop::collection::vec(0.0..1.0f64, 2)) {
            let p = Box::symmetric(dvector![4.0, 4.0]).unwrap().to_hpolytope();
            let small = Box::new(b.center.clone() * 0.5, b.halfwidth.clone()).unwrap();
            let diff = pontryagin_diff_box(&p, &small).unwrap();
            // a point of the difference plus a point of the box lies in p
            let lo = diff.b.clone();
            let x = dvector![-lo[1] + px[0] * (lo[0] + lo[1]), -lo[3] + px[1] * (lo[2] + lo[3])];
            let w = dvector![
                small.center[0] + (2.0 * py[0] - 1.0) * small.halfwidth[0],
                small.center[1] + (2.0 * py[1] - 1.0) * small.halfwidth[1]
            ];
            prop_assert!(diff.contains(&x, 1e-9));
            prop_assert!(p.contains(&(&x + &w), 1e-7));
        }

        #[test]
        fn linear_map_composition_is_conservative(
            m1 in prop::collection::vec(-2.0..2.0f64, 4),
            m2 in prop::collection::vec(-2.0..2.0f64, 4),
            b in arb_box(),
        ) {
            let m1 = DMatrix::from_vec(2, 2, m1);
            let m2 = DMatrix::from_vec(2, 2, m2);
            let direct = linear_map_box(&(&m1 * &m2), &b);
            let nested = linear_map_box(&m1, &linear_map_box(&m2, &b));
            for i in 0..2 {
                prop_assert!(direct.halfwidth[i] <= nested.halfwidth[i] + 1e-9);
            }
        }
    }
}
