//! Offline constraint backoffs from a Wasserstein-robust CVaR program.
//!
//! For a row `a`, the backoff `η` is the smallest value with
//! `sup_{Q ∈ ball} CVaR_{1−α}(aᵀw − η) ≤ 0`, where the ball has radius `θ`
//! around the empirical distribution of the samples (∞-norm ground metric)
//! and the support is `{ξ : Hξ ≤ h}`. The reformulation is an LP.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Box, HPolytope, SupportFunction};
use crate::solvers::{solve_lp, LpProblem, SolveReport, SolveStatus};
use crate::uncertainty::DisturbanceEstimate;

/// Tolerance for flagging `η` as sitting on the support bound.
pub const CLAMP_TOL: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DroError {
    #[error("risk level {0} outside (0, 1)")]
    RiskLevel(f64),
    #[error("radius {0} is negative")]
    Radius(f64),
    #[error("no samples")]
    NoSamples,
    #[error("dimension mismatch in {0}")]
    Dimension(&'static str),
    #[error("sample {0} lies outside the support")]
    SampleOutsideSupport(usize),
    #[error("backoff LP ended with status {0:?}")]
    Lp(SolveStatus),
    #[error("support computation failed: {0}")]
    Support(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DroInstance {
    pub direction: DVector<f64>,
    pub samples: Vec<DVector<f64>>,
    pub support: HPolytope,
    pub alpha: f64,
    pub theta: f64,
}

impl DroInstance {
    pub fn new(
        direction: DVector<f64>,
        samples: Vec<DVector<f64>>,
        support: HPolytope,
        alpha: f64,
        theta: f64,
    ) -> Result<Self, DroError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(DroError::RiskLevel(alpha));
        }
        if !(theta >= 0.0) {
            return Err(DroError::Radius(theta));
        }
        if samples.is_empty() {
            return Err(DroError::NoSamples);
        }
        let n = direction.len();
        if support.dim() != n || samples.iter().any(|s| s.len() != n) {
            return Err(DroError::Dimension("direction, samples and support"));
        }
        for (i, s) in samples.iter().enumerate() {
            if !support.contains(s, 1e-9) {
                return Err(DroError::SampleOutsideSupport(i));
            }
        }
        Ok(Self { direction, samples, support, alpha, theta })
    }

    pub fn n_xi(&self) -> usize {
        self.direction.len()
    }
}

/// Column positions of the LP variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DroLayout {
    pub n_samples: usize,
    pub n_rows: usize,
    pub n_xi: usize,
}

impl DroLayout {
    pub const ETA: usize = 0;
    pub const T: usize = 1;
    pub const LAMBDA: usize = 2;

    pub fn s(&self, l: usize) -> usize {
        3 + l
    }

    pub fn gamma(&self, l: usize, r: usize) -> usize {
        3 + self.n_samples + l * self.n_rows + r
    }

    pub fn z(&self, l: usize, k: usize) -> usize {
        3 + self.n_samples * (1 + self.n_rows) + l * self.n_xi + k
    }

    pub fn n_vars(&self) -> usize {
        3 + self.n_samples * (1 + self.n_rows + self.n_xi)
    }
}

pub fn layout(inst: &DroInstance) -> DroLayout {
    DroLayout { n_samples: inst.samples.len(), n_rows: inst.support.nrows(), n_xi: inst.n_xi() }
}

/// Variables `(η, t, λ, s_l, γ_l, z_l)`, objective `min η`:
///
/// ```text
/// λθ + (1/N) Σ s_l − tα ≤ 0
/// −η + t + γ_lᵀ(h − Hξ̂_l) − s_l ≤ −aᵀξ̂_l
/// ±(a − Hᵀγ_l) ≤ z_l,   Σ_k z_lk ≤ λ
/// η, λ, s, γ, z ≥ 0,   t free
/// ```
pub fn build_cvar_dro_lp(inst: &DroInstance) -> LpProblem {
    let lay = layout(inst);
    let n = lay.n_samples;
    let (h, hb) = (&inst.support.h, &inst.support.b);
    let a = &inst.direction;
    let mut cost = DVector::zeros(lay.n_vars());
    cost[DroLayout::ETA] = 1.0;
    let mut bounds = vec![(0.0, f64::INFINITY); lay.n_vars()];
    bounds[DroLayout::T] = (f64::NEG_INFINITY, f64::INFINITY);
    let mut lp = LpProblem::new(cost).with_bounds(bounds);

    let inv_n = 1.0 / n as f64;
    let mut budget = vec![(DroLayout::LAMBDA, inst.theta), (DroLayout::T, -inst.alpha)];
    budget.extend((0..n).map(|l| (lay.s(l), inv_n)));
    lp.push_le(budget, 0.0);

    for (l, xi) in inst.samples.iter().enumerate() {
        let slack = hb - h * xi;
        let mut row = vec![(DroLayout::ETA, -1.0), (DroLayout::T, 1.0), (lay.s(l), -1.0)];
        row.extend((0..lay.n_rows).map(|r| (lay.gamma(l, r), slack[r])));
        lp.push_le(row, -a.dot(xi));

        for k in 0..lay.n_xi {
            let ht: Vec<(usize, f64)> = (0..lay.n_rows)
                .filter(|&r| h[(r, k)] != 0.0)
                .map(|r| (lay.gamma(l, r), h[(r, k)]))
                .collect();
            // a_k − (Hᵀγ)_k ≤ z_k
            let mut lo = ht.iter().map(|&(j, v)| (j, -v)).collect::<Vec<_>>();
            lo.push((lay.z(l, k), -1.0));
            lp.push_le(lo, -a[k]);
            // (Hᵀγ)_k − a_k ≤ z_k
            let mut hi = ht;
            hi.push((lay.z(l, k), -1.0));
            lp.push_le(hi, a[k]);
        }
        let mut norm = vec![(DroLayout::LAMBDA, -1.0)];
        norm.extend((0..lay.n_xi).map(|k| (lay.z(l, k), 1.0)));
        lp.push_le(norm, 0.0);
    }
    lp
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackoffResult {
    pub eta: f64,
    pub lp_report: SolveReport,
    /// `η` sits on `support(Ŵ, a)`, the robust worst case.
    pub clamped: bool,
    pub support_bound: f64,
}

pub fn compute_backoff(inst: &DroInstance) -> Result<BackoffResult, DroError> {
    let lp = build_cvar_dro_lp(inst);
    let mut report = solve_lp(&lp);
    if !report.is_optimal() {
        return Err(DroError::Lp(report.status));
    }
    let x = report.solution.as_ref().expect("optimal report carries a solution");
    let eta = x[DroLayout::ETA].max(0.0);
    // Keep the bundle small: the full primal vector has thousands of entries.
    report.solution = Some(DVector::from_column_slice(&x.as_slice()[..3]));
    let support_bound = inst
        .support
        .support(&inst.direction)
        .map_err(|e| DroError::Support(e.to_string()))?;
    Ok(BackoffResult {
        eta,
        clamped: (eta - support_bound).abs() <= CLAMP_TOL,
        support_bound,
        lp_report: report,
    })
}

/// One backoff per row of `F`, using the disturbance samples and support box.
pub fn backoff_vector(
    f: &DMatrix<f64>,
    alpha: &DVector<f64>,
    estimate: &DisturbanceEstimate,
    theta: f64,
) -> Result<Vec<BackoffResult>, DroError> {
    backoff_vector_with_support(f, alpha, &estimate.samples, &estimate.support_box, theta)
}

pub fn backoff_vector_with_support(
    f: &DMatrix<f64>,
    alpha: &DVector<f64>,
    samples: &[DVector<f64>],
    support: &Box,
    theta: f64,
) -> Result<Vec<BackoffResult>, DroError> {
    if alpha.len() != f.nrows() {
        return Err(DroError::Dimension("alpha vs rows of F"));
    }
    if support.dim() != f.ncols() {
        return Err(DroError::Dimension("support vs columns of F"));
    }
    let support = support.to_hpolytope();
    (0..f.nrows())
        .into_par_iter()
        .map(|j| {
            let a = f.row(j).transpose();
            let inst = DroInstance::new(a, samples.to_vec(), support.clone(), alpha[j], theta)?;
            compute_backoff(&inst)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::SparseRow;
    use nalgebra::{dmatrix, dvector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Upper-tail average over the top `α` fraction of the samples.
    fn sorted_tail_cvar(values: &[f64], alpha: f64) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(|a, b| b.total_cmp(a));
        let mass = alpha * v.len() as f64;
        let k = mass.floor() as usize;
        let mut sum: f64 = v[..k].iter().sum();
        if k < v.len() {
            sum += (mass - k as f64) * v[k];
        }
        sum / mass
    }

    fn interval(lo: f64, hi: f64) -> HPolytope {
        HPolytope::new(dmatrix![1.0; -1.0], dvector![hi, -lo]).unwrap()
    }

    fn scalar(samples: &[f64], support: HPolytope, alpha: f64, theta: f64) -> DroInstance {
        DroInstance::new(dvector![1.0], samples.iter().map(|&v| dvector![v]).collect(), support, alpha, theta).unwrap()
    }

    #[test]
    fn variable_count_single_sample() {
        let inst = scalar(&[0.0], interval(-1.0, 1.0), 0.1, 0.0);
        let lp = build_cvar_dro_lp(&inst);
        // η, t, λ, s, two γ, one z.
        assert_eq!(lp.nvars(), 1 + 1 + 1 + 1 + 2 + 1);
        assert_eq!(lp.ineq.len(), 1 + 1 + 2 + 1);
    }

    #[test]
    fn structure_matches_hand_transcription() {
        let inst = scalar(&[0.02, -0.05], interval(-0.1, 0.1), 0.2, 0.01);
        let lp = build_cvar_dro_lp(&inst);
        // Columns: η t λ s1 s2 γ11 γ12 γ21 γ22 z1 z2
        let rows = vec![
            SparseRow::new(vec![(2, 0.01), (1, -0.2), (3, 0.5), (4, 0.5)], 0.0),
            SparseRow::new(vec![(0, -1.0), (1, 1.0), (3, -1.0), (5, 0.1 - 0.02), (6, 0.1 + 0.02)], -0.02),
            SparseRow::new(vec![(5, -1.0), (6, 1.0), (9, -1.0)], -1.0),
            SparseRow::new(vec![(5, 1.0), (6, -1.0), (9, -1.0)], 1.0),
            SparseRow::new(vec![(2, -1.0), (9, 1.0)], 0.0),
            SparseRow::new(vec![(0, -1.0), (1, 1.0), (4, -1.0), (7, 0.1 + 0.05), (8, 0.1 - 0.05)], 0.05),
            SparseRow::new(vec![(7, -1.0), (8, 1.0), (10, -1.0)], -1.0),
            SparseRow::new(vec![(7, 1.0), (8, -1.0), (10, -1.0)], 1.0),
            SparseRow::new(vec![(2, -1.0), (10, 1.0)], 0.0),
        ];
        assert_eq!(lp.ineq.len(), rows.len());
        for (got, want) in lp.ineq.iter().zip(&rows) {
            let mut g = got.coeffs.clone();
            let mut w = want.coeffs.clone();
            g.sort_by_key(|c| c.0);
            w.sort_by_key(|c| c.0);
            assert_eq!(g.len(), w.len());
            for (x, y) in g.iter().zip(&w) {
                assert_eq!(x.0, y.0);
                assert!((x.1 - y.1).abs() < 1e-15);
            }
            assert!((got.rhs - want.rhs).abs() < 1e-15);
        }
        assert_eq!(lp.bounds[DroLayout::T], (f64::NEG_INFINITY, f64::INFINITY));
        assert!(lp.bounds.iter().enumerate().all(|(j, b)| j == DroLayout::T || *b == (0.0, f64::INFINITY)));
    }

    #[test]
    fn zero_samples_give_zero_backoff() {
        for alpha in [0.05, 0.3, 0.9] {
            let r = compute_backoff(&scalar(&[0.0; 5], interval(-0.1, 0.1), alpha, 0.0)).unwrap();
            assert!(r.eta.abs() < 1e-10);
        }
    }

    #[test]
    fn theta_zero_matches_sorted_tail_cvar() {
        let samples = [-0.05, 0.0, 0.02, 0.06, 0.09];
        let r = compute_backoff(&scalar(&samples, interval(-0.1, 0.1), 0.2, 0.0)).unwrap();
        assert!((r.eta - sorted_tail_cvar(&samples, 0.2)).abs() < 1e-8);
        assert!((r.eta - 0.09).abs() < 1e-8);
        let r = compute_backoff(&scalar(&samples, interval(-0.1, 0.1), 0.5, 0.0)).unwrap();
        assert!((r.eta - sorted_tail_cvar(&samples, 0.5)).abs() < 1e-8);
    }

    #[test]
    fn unbounded_support_reduces_to_empirical_cvar() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = compute_backoff(&scalar(&samples, interval(-1e6, 1e6), 0.15, 0.0)).unwrap();
        assert!((r.eta - sorted_tail_cvar(&samples, 0.15)).abs() < 1e-8);
    }

    #[test]
    fn slope_and_clamp_in_scalar_regime() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<f64> = (0..100).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let eta = |theta: f64| compute_backoff(&scalar(&samples, interval(-0.1, 0.1), 0.1, theta)).unwrap();
        let (e1, e2) = (eta(1e-5), eta(1e-4));
        assert!(((e2.eta - e1.eta) - (1e-4 - 1e-5) / 0.1).abs() < 1e-6);
        let big = eta(1e-1);
        assert!(big.clamped);
        assert!((big.eta - 0.1).abs() < 1e-9);
        assert!(!e1.clamped);
    }

    #[test]
    fn invalid_instances_are_rejected() {
        let s = vec![dvector![0.0]];
        assert_eq!(DroInstance::new(dvector![1.0], s.clone(), interval(-1.0, 1.0), 1.0, 0.0).unwrap_err(), DroError::RiskLevel(1.0));
        assert_eq!(DroInstance::new(dvector![1.0], s.clone(), interval(-1.0, 1.0), 0.1, -1.0).unwrap_err(), DroError::Radius(-1.0));
        assert_eq!(
            DroInstance::new(dvector![1.0], vec![dvector![2.0]], interval(-1.0, 1.0), 0.1, 0.0).unwrap_err(),
            DroError::SampleOutsideSupport(0)
        );
    }

    #[test]
    fn backoff_vector_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<DVector<f64>> = (0..60)
            .map(|_| dvector![rng.gen_range(-0.001..0.001), rng.gen_range(-0.1..0.1)])
            .collect();
        let support = Box::from_bounds(&dvector![-0.001, -0.1], &dvector![0.001, 0.1]).unwrap();
        let f = dmatrix![0.0, 1.0; 0.0, 0.0; 0.0, 1.0; 1.0, 0.0];
        let alpha = dvector![0.1, 0.1, 0.1, 0.2];
        let res = backoff_vector_with_support(&f, &alpha, &samples, &support, 1e-4).unwrap();
        assert!(res[1].eta.abs() < 1e-12);
        assert_eq!(res[0].eta, res[2].eta);
        for j in [0, 3] {
            let inst = DroInstance::new(f.row(j).transpose(), samples.clone(), support.to_hpolytope(), alpha[j], 1e-4).unwrap();
            assert!((compute_backoff(&inst).unwrap().eta - res[j].eta).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]

        #[test]
        fn monotone_in_radius(seed in 0u64..1000, t1 in 0.0f64..0.02, dt in 0.0f64..0.02) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<f64> = (0..20).map(|_| rng.gen_range(-0.1..0.1)).collect();
            let e = |theta| compute_backoff(&scalar(&samples, interval(-0.1, 0.1), 0.1, theta)).unwrap().eta;
            proptest::prop_assert!(e(t1) <= e(t1 + dt) + 1e-9);
        }
    }
}
