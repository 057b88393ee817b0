//! Data-driven disturbance support, model-error sets, and sample-size bounds.

use std::path::Path;

use log::warn;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, Box, GeometryError, SupportFunction, MEMBERSHIP_TOL};
use crate::io::{IoError, Table};
use crate::koopman::{Dataset, KoopmanError, LiftedModel};
use crate::solvers::{solve_lp, LpProblem, SolveStatus};

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("sample {index} has norm {norm:e} outside the radius {radius:e}")]
    SampleOutsideRadius { index: usize, norm: f64, radius: f64 },
    #[error("no samples")]
    EmptyData,
    #[error("dimension mismatch in {0}")]
    Dimension(&'static str),
    #[error("parameter out of domain: {0}")]
    Domain(String),
    #[error("transport LP failed: {0:?}")]
    Transport(SolveStatus),
    #[error(transparent)]
    Koopman(#[from] KoopmanError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Pairs `(x_i, x_i⁺)` recorded near the origin under zero input.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DisturbancePairs {
    pub x: Vec<DVector<f64>>,
    pub x_next: Vec<DVector<f64>>,
}

impl DisturbancePairs {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn push(&mut self, x: DVector<f64>, x_next: DVector<f64>) {
        self.x.push(x);
        self.x_next.push(x_next);
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), UncertaintyError> {
        let nx = self.x.first().map_or(0, |v| v.len());
        let mut header: Vec<String> = (1..=nx).map(|i| format!("x{i}")).collect();
        header.extend((1..=nx).map(|i| format!("x{i}_next")));
        let mut t = Table::new(header);
        for (x, xn) in self.x.iter().zip(&self.x_next) {
            t.push(x.iter().chain(xn.iter()).copied().collect());
        }
        Ok(t.write_csv(path)?)
    }

    pub fn read_csv(path: &Path) -> Result<Self, UncertaintyError> {
        let t = Table::read_csv(path)?;
        if t.header.len() % 2 != 0 {
            return Err(UncertaintyError::Dimension("disturbance CSV needs x and x_next columns"));
        }
        let nx = t.header.len() / 2;
        let mut out = Self::default();
        for row in &t.rows {
            out.push(DVector::from_column_slice(&row[..nx]), DVector::from_column_slice(&row[nx..]));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceEstimate {
    /// `ŵ_i = x_i⁺`.
    pub samples: Vec<DVector<f64>>,
    /// Sample hull grown by `L_x·ε_x` on every side.
    pub support_box: Box,
    /// Largest `‖x_i‖` actually observed.
    pub epsilon_x: f64,
    /// Radius the collection protocol guarantees.
    pub radius: f64,
    pub lipschitz_lx: f64,
    /// `L_x · radius`, the per-sample estimation error bound.
    pub error_bound: f64,
}

/// `ŵ_i = x_i⁺`, with support outer-approximated by the sample hull grown by `L_x ε_x`.
pub fn estimate_disturbances(
    pairs: &DisturbancePairs,
    lipschitz_lx: f64,
    radius: f64,
) -> Result<DisturbanceEstimate, UncertaintyError> {
    if pairs.is_empty() {
        return Err(UncertaintyError::EmptyData);
    }
    if !(lipschitz_lx >= 0.0 && radius >= 0.0) {
        return Err(UncertaintyError::Domain("L_x and radius must be nonnegative".into()));
    }
    let mut eps_obs: f64 = 0.0;
    for (i, x) in pairs.x.iter().enumerate() {
        let norm = x.norm();
        if norm > radius * (1.0 + 1e-12) {
            return Err(UncertaintyError::SampleOutsideRadius { index: i, norm, radius });
        }
        eps_obs = eps_obs.max(norm);
    }
    let error_bound = lipschitz_lx * radius;
    let hull = Box::hull(&pairs.x_next).ok_or(UncertaintyError::EmptyData)?;
    Ok(DisturbanceEstimate {
        samples: pairs.x_next.clone(),
        support_box: hull.inflate(error_bound),
        epsilon_x: eps_obs,
        radius,
        lipschitz_lx,
        error_bound,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelErrorSets {
    /// `W̄`, hull of the lifted residuals.
    pub total_hull: Box,
    /// `𝔻 = W̄ ⊖ DŴ_w`.
    pub model_error: Box,
    /// Residuals `w̄_i = Ψ(x_i⁺) − AΨ(x_i) − Bu_i`.
    pub samples: Vec<DVector<f64>>,
    /// Coordinates where the difference was empty and clamped to `{0}`.
    pub clamped: Vec<usize>,
}

/// Residual hull and model-error box.
///
/// With `include_origin` the hull also contains `0`, so the nominal
/// prediction itself is always an admissible outcome.
pub fn extract_model_errors(
    model: &LiftedModel,
    data: &Dataset,
    disturbance: &DisturbanceEstimate,
    include_origin: bool,
) -> Result<ModelErrorSets, UncertaintyError> {
    if data.is_empty() {
        return Err(UncertaintyError::EmptyData);
    }
    let n = model.n();
    if disturbance.support_box.dim() != model.n_x() {
        return Err(UncertaintyError::Dimension("disturbance support vs state"));
    }
    let dict = &model.dictionary;
    let mut samples = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let s = dict.lift(&data.x[i])?;
        let s_next = dict.lift(&data.x_next[i])?;
        samples.push(s_next - &model.a * s - &model.b * &data.u[i]);
    }
    let mut hull = Box::hull(&samples).ok_or(UncertaintyError::EmptyData)?;
    if include_origin {
        hull = hull.expand_to(&DVector::zeros(n));
    }
    let dw = disturbance.support_box.embed(n);
    let (model_error, clamped) = geometry::box_pontryagin_diff(&hull, &dw)?;
    if !clamped.is_empty() {
        warn!(
            "model-error set empty in lifted coordinates {clamped:?}: disturbance support exceeds residual hull; clamped to {{0}}"
        );
    }
    for w in &samples {
        debug_assert!(hull.contains(w, MEMBERSHIP_TOL));
    }
    Ok(ModelErrorSets { total_hull: hull, model_error, samples, clamped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoeffdingCert {
    pub epsilon_h: f64,
    pub delta_h: f64,
    pub required_n: usize,
    pub actual_n: usize,
    pub valid: bool,
}

/// `⌈−ln(δ/2) / (2ε²)⌉`.
pub fn hoeffding_required_samples(epsilon_h: f64, delta_h: f64) -> Result<usize, UncertaintyError> {
    let in_unit = |v: f64| v > 0.0 && v < 1.0;
    if !in_unit(epsilon_h) || !in_unit(delta_h) {
        return Err(UncertaintyError::Domain(format!(
            "epsilon_h={epsilon_h}, delta_h={delta_h} must lie in (0, 1)"
        )));
    }
    Ok(hoeffding_bound(epsilon_h, delta_h).ceil() as usize)
}

/// The unrounded bound.
pub fn hoeffding_bound(epsilon_h: f64, delta_h: f64) -> f64 {
    -(delta_h / 2.0).ln() / (2.0 * epsilon_h * epsilon_h)
}

pub fn hoeffding_certificate(epsilon_h: f64, delta_h: f64, actual_n: usize) -> Result<HoeffdingCert, UncertaintyError> {
    let required_n = hoeffding_required_samples(epsilon_h, delta_h)?;
    Ok(HoeffdingCert { epsilon_h, delta_h, required_n, actual_n, valid: actual_n >= required_n })
}

/// How the Wasserstein ball radius is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RadiusRule {
    /// Use the configured radius, floored at the estimation error `L_x ε_x`.
    Fixed { radius: f64 },
    /// Configured radius plus `L_x ε_x`.
    Inflated { radius: f64 },
    /// `(ln(c₁/β) / (c₂ N))^{1/max(n_x,2)} + L_x ε_x`.
    Concentration { c1: f64, c2: f64, beta: f64 },
}

pub fn wasserstein_radius(
    rule: RadiusRule,
    lipschitz_lx: f64,
    epsilon_x: f64,
    n_samples: usize,
    n_x: usize,
) -> Result<f64, UncertaintyError> {
    let floor = lipschitz_lx * epsilon_x;
    match rule {
        RadiusRule::Fixed { radius } if radius >= 0.0 => Ok(radius.max(floor)),
        RadiusRule::Inflated { radius } if radius >= 0.0 => Ok(radius + floor),
        RadiusRule::Concentration { c1, c2, beta } => {
            if !(c1 > 0.0 && c2 > 0.0 && beta > 0.0 && beta < 1.0 && n_samples > 0) {
                return Err(UncertaintyError::Domain("concentration constants".into()));
            }
            let base = ((c1 / beta).ln().max(0.0) / (c2 * n_samples as f64)).powf(1.0 / n_x.max(2) as f64);
            Ok(base + floor)
        }
        _ => Err(UncertaintyError::Domain("radius must be nonnegative".into())),
    }
}

/// Type-1 Wasserstein distance between two uniform empirical measures of equal
/// size under the ∞-norm ground metric, via the transport LP.
pub fn wasserstein_empirical(a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<f64, UncertaintyError> {
    let n = a.len();
    if n == 0 || b.len() != n {
        return Err(UncertaintyError::Dimension("empirical measures must have equal nonzero size"));
    }
    let cost = DVector::from_iterator(
        n * n,
        (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| (&a[i] - &b[j]).amax()),
    );
    let mut lp = LpProblem::new(cost).nonnegative();
    let w = 1.0 / n as f64;
    for i in 0..n {
        lp.push_eq((0..n).map(|j| (i * n + j, 1.0)).collect(), w);
    }
    for j in 0..n {
        lp.push_eq((0..n).map(|i| (i * n + j, 1.0)).collect(), w);
    }
    let rep = solve_lp(&lp);
    if !rep.is_optimal() {
        return Err(UncertaintyError::Transport(rep.status));
    }
    Ok(rep.objective)
}

/// Lower estimate of `L_x` from `max ‖f(x) − f(0)‖ / ‖x‖` over probe points.
/// For display only.
pub fn empirical_lipschitz<F>(f: F, probes: &[DVector<f64>]) -> f64
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let Some(first) = probes.first() else {
        return 0.0;
    };
    let f0 = f(&DVector::zeros(first.len()));
    probes
        .iter()
        .filter(|x| x.norm() > 0.0)
        .map(|x| (f(x) - &f0).norm() / x.norm())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::koopman::Dictionary;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairs(xs: &[(f64, f64)]) -> DisturbancePairs {
        let mut p = DisturbancePairs::default();
        for &(x, xn) in xs {
            p.push(dvector![x], dvector![xn]);
        }
        p
    }

    #[test]
    fn zero_states_need_no_expansion() {
        let est = estimate_disturbances(&pairs(&[(0.0, 0.02), (0.0, -0.01)]), 3.0, 0.0).unwrap();
        assert_eq!(est.samples, vec![dvector![0.02], dvector![-0.01]]);
        assert!((est.support_box.lower()[0] + 0.01).abs() < 1e-15);
        assert!((est.support_box.upper()[0] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn hull_expanded_by_lipschitz_radius() {
        let est = estimate_disturbances(&pairs(&[(0.01, 0.05), (0.0, -0.03)]), 2.0, 0.01).unwrap();
        assert!((est.support_box.lower()[0] + 0.05).abs() < 1e-12);
        assert!((est.support_box.upper()[0] - 0.07).abs() < 1e-12);
        assert!((est.error_bound - 0.02).abs() < 1e-15);
        assert!((est.epsilon_x - 0.01).abs() < 1e-15);
    }

    #[test]
    fn sample_outside_radius_is_rejected() {
        let err = estimate_disturbances(&pairs(&[(0.5, 0.0)]), 1.0, 0.1).unwrap_err();
        assert!(matches!(err, UncertaintyError::SampleOutsideRadius { index: 0, .. }));
    }

    #[test]
    fn disturbance_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dw.csv");
        let mut d = DisturbancePairs::default();
        d.push(dvector![1e-5, -2e-5], dvector![0.0005, 0.07]);
        d.write_csv(&p).unwrap();
        assert_eq!(DisturbancePairs::read_csv(&p).unwrap(), d);
    }

    fn identity_model() -> LiftedModel {
        let dict = Dictionary::from_names(2, &["x1", "x2", "x1^2"]).unwrap();
        let a = dmatrix![0.9, 0.1, 0.0; 0.0, 0.8, 0.0; 0.0, 0.0, 0.5];
        let b = dmatrix![0.0; 1.0; 0.0];
        LiftedModel::from_matrices(dict, a, b).unwrap()
    }

    #[test]
    fn exact_nominal_data_gives_zero_sets() {
        let model = identity_model();
        let mut data = Dataset::default();
        // From the origin the next state is Bu, which the dictionary reproduces exactly.
        for k in 0..5 {
            let x = dvector![0.0, 0.0];
            let u = dvector![k as f64 * 0.1];
            let s = model.dictionary.lift(&x).unwrap();
            let sn = &model.a * s + &model.b * &u;
            data.push(x, u, sn.rows(0, 2).into_owned());
        }
        let est = estimate_disturbances(&pairs2(&[]), 0.0, 0.0).unwrap();
        let sets = extract_model_errors(&model, &data, &est, true).unwrap();
        assert!(sets.samples.iter().all(|w| w.amax() < 1e-14));
        assert!(sets.model_error.halfwidth.amax() < 1e-14);
        assert!(sets.model_error.center.amax() < 1e-14);
    }

    fn pairs2(extra: &[(f64, f64)]) -> DisturbancePairs {
        let mut p = DisturbancePairs::default();
        p.push(dvector![0.0, 0.0], dvector![0.0, 0.0]);
        for &(a, b) in extra {
            p.push(dvector![0.0, 0.0], dvector![a, b]);
        }
        p
    }

    #[test]
    fn model_error_box_matches_definition() {
        // One residual (0.3, 0, 0) and Ŵ_w = [−0.1, 0.1] × {0}.
        let model = identity_model();
        let mut data = Dataset::default();
        let x = dvector![0.0, 0.0];
        data.push(x, dvector![0.0], dvector![0.3, 0.0]);
        let est = estimate_disturbances(&pairs2(&[(-0.1, 0.0), (0.1, 0.0)]), 0.0, 0.0).unwrap();
        let sets = extract_model_errors(&model, &data, &est, true).unwrap();
        assert!(sets.clamped.is_empty());
        let dbox = &sets.model_error;
        assert!((dbox.lower()[0] - 0.1).abs() < 1e-12 && (dbox.upper()[0] - 0.2).abs() < 1e-12);
        // Vertex check: every a in 𝔻 satisfies a + Dw ∈ W̄ for every vertex w of Ŵ_w,
        // and points just outside 𝔻 fail for some vertex.
        let dw = est.support_box.embed(3);
        for a in dbox.vertices() {
            for w in dw.vertices() {
                assert!(sets.total_hull.contains(&(&a + w), 1e-12));
            }
        }
        let outside = dvector![0.2 + 1e-6, 0.0, 0.0];
        assert!(dw.vertices().iter().any(|w| !sets.total_hull.contains(&(&outside + w), 1e-12)));
        // Without the origin the single residual cannot absorb the disturbance.
        let tight = extract_model_errors(&model, &data, &est, false).unwrap();
        assert_eq!(tight.clamped, vec![0]);
    }

    #[test]
    fn hoeffding_values() {
        assert_eq!(hoeffding_required_samples(0.05, 0.05).unwrap(), 738);
        assert_eq!(hoeffding_required_samples(0.1, 0.05).unwrap(), 185);
        let ratio = hoeffding_bound(0.025, 0.05) / hoeffding_bound(0.05, 0.05);
        assert!((ratio - 4.0).abs() < 1e-12);
        assert!(hoeffding_required_samples(0.0, 0.5).is_err());
        assert!(hoeffding_required_samples(0.5, 1.0).is_err());
        let cert = hoeffding_certificate(0.05, 0.05, 1000).unwrap();
        assert!(cert.valid);
        assert!(!hoeffding_certificate(0.05, 0.05, 737).unwrap().valid);
    }

    #[test]
    fn radius_rules() {
        let fixed = RadiusRule::Fixed { radius: 1e-4 };
        assert_eq!(wasserstein_radius(fixed, 0.0, 0.0, 100, 2).unwrap(), 1e-4);
        let infl = RadiusRule::Inflated { radius: 1e-4 };
        assert!((wasserstein_radius(infl, 2.0, 0.01, 100, 2).unwrap() - 0.0201).abs() < 1e-15);
        // β → 1, huge N: the concentration term vanishes.
        let conc = RadiusRule::Concentration { c1: 1.0, c2: 1.0, beta: 1.0 - 1e-12 };
        let r = wasserstein_radius(conc, 2.0, 0.01, 1_000_000_000, 2).unwrap();
        assert!((r - 0.02).abs() < 1e-6);
        assert!(r >= 0.02);
    }

    #[test]
    fn wasserstein_of_identical_and_shifted_measures() {
        let a: Vec<_> = [0.0, 0.3, -0.2].iter().map(|&v| dvector![v]).collect();
        assert!(wasserstein_empirical(&a, &a).unwrap().abs() < 1e-12);
        let b: Vec<_> = a.iter().map(|v| v.add_scalar(0.05)).collect();
        assert!((wasserstein_empirical(&a, &b).unwrap() - 0.05).abs() < 1e-10);
    }

    #[test]
    fn empirical_lipschitz_of_linear_map() {
        let m = dmatrix![0.5, 0.0; 0.0, 2.0];
        let probes = vec![dvector![1.0, 0.0], dvector![0.0, 1.0], dvector![1.0, 1.0]];
        let l = empirical_lipschitz(|x| &m * x, &probes);
        assert!((l - 2.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn paired_shift_bounds_wasserstein(seed in 0u64..10_000, n in 2usize..6, shift in 0.0f64..0.2) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<DVector<f64>> = (0..n).map(|_| DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0))).collect();
            let b: Vec<DVector<f64>> = a
                .iter()
                .map(|v| {
                    let d = DVector::<f64>::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
                    { let s = shift / d.amax().max(1e-12); v + d * s }
                })
                .collect();
            prop_assert!(wasserstein_empirical(&a, &b).unwrap() <= shift + 1e-9);
        }

        #[test]
        fn adding_samples_never_shrinks_support(
            base in prop::collection::vec(-1.0f64..1.0, 1..8),
            extra in -2.0f64..2.0,
        ) {
            let p1 = pairs(&base.iter().map(|&v| (0.0, v)).collect::<Vec<_>>());
            let mut p2 = p1.clone();
            p2.push(dvector![0.0], dvector![extra]);
            let b1 = estimate_disturbances(&p1, 1.0, 0.0).unwrap().support_box;
            let b2 = estimate_disturbances(&p2, 1.0, 0.0).unwrap().support_box;
            prop_assert!(b2.lower()[0] <= b1.lower()[0] + 1e-12 && b2.upper()[0] >= b1.upper()[0] - 1e-12);
        }

        #[test]
        fn residuals_lie_in_hull_and_difference_is_sound(seed in 0u64..10_000) {
            let model = identity_model();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut data = Dataset::default();
            for _ in 0..20 {
                let x = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
                let xn = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
                data.push(x, dvector![rng.gen_range(-1.0..1.0)], xn);
            }
            let est = estimate_disturbances(&pairs2(&[(0.05, -0.05), (-0.02, 0.1)]), 0.0, 0.0).unwrap();
            let sets = extract_model_errors(&model, &data, &est, true).unwrap();
            for w in &sets.samples {
                prop_assert!(sets.total_hull.contains(w, 0.0));
            }
            if sets.clamped.is_empty() {
                let sum = geometry::minkowski_sum_boxes(&sets.model_error, &est.support_box.embed(3));
                prop_assert!((sum.lower() - sets.total_hull.lower()).min() >= -1e-9);
                prop_assert!((sets.total_hull.upper() - sum.upper()).min() >= -1e-9);
            }
        }
    }
}
