//! Ground-truth nonlinear plant: continuous vector field, fixed-step
//! discretization, and additive i.i.d. disturbances.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Box;
use crate::io;
use crate::koopman::Dataset;
use crate::uncertainty::DisturbancePairs;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid plant specification: {0}")]
    Invalid(String),
}

/// Seeded generator for an independent stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VectorField {
    /// `ẋ₁ = x₁` (or `x₂` when corrected), `ẋ₂ = −k x₁³ − c x₂ + b u`.
    CubicSpring {
        #[serde(default = "one")]
        stiffness: f64,
        #[serde(default = "default_damping")]
        damping: f64,
        #[serde(default = "default_gain")]
        input_gain: f64,
        #[serde(default)]
        mass_spring_corrected: bool,
    },
    /// `ẋ = Ax + Bu`.
    Linear {
        #[serde(with = "io::rows")]
        a: DMatrix<f64>,
        #[serde(with = "io::rows")]
        b: DMatrix<f64>,
    },
}

fn one() -> f64 {
    1.0
}
fn default_damping() -> f64 {
    1.5
}
fn default_gain() -> f64 {
    0.5
}

impl VectorField {
    pub fn n_x(&self) -> usize {
        match self {
            Self::CubicSpring { .. } => 2,
            Self::Linear { a, .. } => a.nrows(),
        }
    }

    pub fn n_u(&self) -> usize {
        match self {
            Self::CubicSpring { .. } => 1,
            Self::Linear { b, .. } => b.ncols(),
        }
    }

    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::CubicSpring { stiffness, damping, input_gain, mass_spring_corrected } => {
                let first = if *mass_spring_corrected { x[1] } else { x[0] };
                DVector::from_vec(vec![
                    first,
                    -stiffness * x[0].powi(3) - damping * x[1] + input_gain * u[0],
                ])
            }
            Self::Linear { a, b } => a * x + b * u,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    Rk4,
    Euler,
}

/// One coordinate of the additive disturbance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisturbanceComponent {
    Zero,
    Uniform { lo: f64, hi: f64 },
    /// `scale · (Beta(α, β) + shift)`.
    BetaAffine { alpha: f64, beta: f64, scale: f64, shift: f64 },
}

impl DisturbanceComponent {
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            Self::Zero => (0.0, 0.0),
            Self::Uniform { lo, hi } => (lo, hi),
            Self::BetaAffine { scale, shift, .. } => {
                let (a, b) = (scale * shift, scale * (1.0 + shift));
                (a.min(b), a.max(b))
            }
        }
    }

    fn validate(&self) -> Result<(), PlantError> {
        match *self {
            Self::Zero => Ok(()),
            Self::Uniform { lo, hi } if lo.is_finite() && hi.is_finite() && lo <= hi => Ok(()),
            Self::BetaAffine { alpha, beta, scale, shift }
                if alpha > 0.0 && beta > 0.0 && scale.is_finite() && shift.is_finite() =>
            {
                Ok(())
            }
            other => Err(PlantError::Invalid(format!("bad disturbance component {other:?}"))),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Zero => 0.0,
            Self::Uniform { lo, hi } => {
                if lo == hi {
                    lo
                } else {
                    rng.gen_range(lo..hi)
                }
            }
            Self::BetaAffine { alpha, beta, scale, shift } => {
                let x = Gamma::new(alpha, 1.0).expect("validated shape").sample(rng);
                let y = Gamma::new(beta, 1.0).expect("validated shape").sample(rng);
                scale * (x / (x + y) + shift)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub field: VectorField,
    pub dt: f64,
    #[serde(default)]
    pub integrator: Integrator,
    pub disturbance: Vec<DisturbanceComponent>,
}

impl PlantSpec {
    pub fn validate(&self) -> Result<(), PlantError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(PlantError::Invalid(format!("sampling period {} must be positive", self.dt)));
        }
        if self.disturbance.len() != self.n_x() {
            return Err(PlantError::Invalid(format!(
                "{} disturbance components for {} states",
                self.disturbance.len(),
                self.n_x()
            )));
        }
        if let VectorField::Linear { a, b } = &self.field {
            if a.nrows() != a.ncols() || b.nrows() != a.nrows() || b.ncols() == 0 {
                return Err(PlantError::Invalid("linear field dimensions".into()));
            }
        }
        self.disturbance.iter().try_for_each(DisturbanceComponent::validate)
    }

    pub fn n_x(&self) -> usize {
        self.field.n_x()
    }

    pub fn n_u(&self) -> usize {
        self.field.n_u()
    }

    /// Declared disturbance support.
    pub fn disturbance_support(&self) -> Box {
        let lo = DVector::from_iterator(self.n_x(), self.disturbance.iter().map(|d| d.bounds().0));
        let hi = DVector::from_iterator(self.n_x(), self.disturbance.iter().map(|d| d.bounds().1));
        Box::from_bounds(&lo, &hi).expect("validated bounds")
    }

    /// Noise-free discrete map `f_d(x, u)`.
    pub fn discrete(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let h = self.dt;
        let f = |x: &DVector<f64>| self.field.eval(x, u);
        match self.integrator {
            Integrator::Euler => x + f(x) * h,
            Integrator::Rk4 => {
                let k1 = f(x);
                let k2 = f(&(x + &k1 * (h / 2.0)));
                let k3 = f(&(x + &k2 * (h / 2.0)));
                let k4 = f(&(x + &k3 * h));
                x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
            }
        }
    }
}

pub fn sample_disturbance<R: Rng + ?Sized>(spec: &PlantSpec, rng: &mut R) -> DVector<f64> {
    let w = DVector::from_iterator(spec.n_x(), spec.disturbance.iter().map(|d| d.sample(rng)));
    debug_assert!(spec.disturbance_support().contains(&w, 1e-12));
    w
}

/// `x⁺ = f_d(x, u) + w`; returns the next state and the disturbance drawn.
pub fn step<R: Rng + ?Sized>(
    spec: &PlantSpec,
    x: &DVector<f64>,
    u: &DVector<f64>,
    rng: &mut R,
) -> Result<(DVector<f64>, DVector<f64>), PlantError> {
    if x.iter().chain(u.iter()).any(|v| !v.is_finite()) {
        return Err(PlantError::NonFinite("state or input"));
    }
    let w = sample_disturbance(spec, rng);
    let next = spec.discrete(x, u) + &w;
    if next.iter().any(|v| !v.is_finite()) {
        return Err(PlantError::NonFinite("next state"));
    }
    Ok((next, w))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingProtocol {
    pub n_traj: usize,
    pub traj_len: usize,
    /// Standard deviation of the zero-mean Gaussian initial state.
    pub init_std: f64,
    pub input_mean: f64,
    pub input_std: f64,
    /// Trajectories stop once `‖x‖∞` exceeds this.
    pub safety_box: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub dataset: Dataset,
    pub truncated_trajectories: usize,
}

/// Random-input trajectories, one RNG stream per trajectory.
pub fn generate_training_data(spec: &PlantSpec, proto: &TrainingProtocol, seed: u64) -> Result<TrainingData, PlantError> {
    spec.validate()?;
    let init = Normal::new(0.0, proto.init_std).map_err(|e| PlantError::Invalid(e.to_string()))?;
    let input = Normal::new(proto.input_mean, proto.input_std).map_err(|e| PlantError::Invalid(e.to_string()))?;
    let inside = |x: &DVector<f64>| proto.safety_box.is_none_or(|r| x.amax() <= r);
    let per_traj: Vec<(Vec<(DVector<f64>, DVector<f64>, DVector<f64>)>, bool)> = (0..proto.n_traj)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed, k as u64);
            let mut x = DVector::from_fn(spec.n_x(), |_, _| init.sample(&mut rng));
            let mut out = Vec::with_capacity(proto.traj_len);
            if !inside(&x) {
                return Ok((out, true));
            }
            for _ in 0..proto.traj_len {
                let u = DVector::from_fn(spec.n_u(), |_, _| input.sample(&mut rng));
                let (next, _) = step(spec, &x, &u, &mut rng)?;
                if !inside(&next) {
                    return Ok((out, true));
                }
                out.push((x, u, next.clone()));
                x = next;
            }
            Ok((out, false))
        })
        .collect::<Result<_, PlantError>>()?;
    let mut dataset = Dataset::default();
    let mut truncated = 0;
    for (traj, cut) in per_traj {
        truncated += usize::from(cut);
        for (x, u, xn) in traj {
            dataset.push(x, u, xn);
        }
    }
    if truncated > 0 {
        log::info!("{truncated} of {} training trajectories left the safety box and were truncated", proto.n_traj);
    }
    Ok(TrainingData { dataset, truncated_trajectories: truncated })
}

/// `n` one-step transitions under zero input from states drawn uniformly in
/// the Euclidean ball of radius `eps_x`.
pub fn generate_disturbance_data(spec: &PlantSpec, eps_x: f64, n: usize, seed: u64) -> Result<DisturbancePairs, PlantError> {
    spec.validate()?;
    if !(eps_x >= 0.0) {
        return Err(PlantError::Invalid("radius must be nonnegative".into()));
    }
    let mut rng = stream_rng(seed, u64::MAX);
    let nx = spec.n_x();
    let u = DVector::zeros(spec.n_u());
    let mut pairs = DisturbancePairs::default();
    for _ in 0..n {
        let dir: DVector<f64> = DVector::from_fn(nx, |_, _| StandardNormal.sample(&mut rng));
        let r = eps_x * rng.gen::<f64>().powf(1.0 / nx as f64);
        let norm = dir.norm();
        let x = if norm > 0.0 { dir * (r / norm) } else { DVector::zeros(nx) };
        let (next, _) = step(spec, &x, &u, &mut rng)?;
        pairs.push(x, next);
    }
    Ok(pairs)
}

/// Closed-loop record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub disturbances: Vec<DVector<f64>>,
    pub objective: Vec<f64>,
    /// Controller wall time per step, seconds.
    pub solve_time: Vec<f64>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_consistent(&self) -> bool {
        let t = self.inputs.len();
        self.states.len() == t + 1
            && self.disturbances.len() == t
            && self.objective.len() == t
            && self.solve_time.len() == t
            && self.states.iter().chain(&self.inputs).all(|v| v.iter().all(|x| x.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn cubic_spring(corrected: bool, dist: Vec<DisturbanceComponent>) -> PlantSpec {
        PlantSpec {
            field: VectorField::CubicSpring { stiffness: 1.0, damping: 1.5, input_gain: 0.5, mass_spring_corrected: corrected },
            dt: 0.1,
            integrator: Integrator::Rk4,
            disturbance: dist,
        }
    }

    fn uniform() -> Vec<DisturbanceComponent> {
        vec![
            DisturbanceComponent::Uniform { lo: -0.001, hi: 0.001 },
            DisturbanceComponent::Uniform { lo: -0.1, hi: 0.1 },
        ]
    }

    #[test]
    fn equilibrium_without_disturbance() {
        let spec = cubic_spring(false, vec![DisturbanceComponent::Zero; 2]);
        let (x, w) = step(&spec, &dvector![0.0, 0.0], &dvector![0.0], &mut stream_rng(1, 0)).unwrap();
        assert_eq!(x, dvector![0.0, 0.0]);
        assert_eq!(w, dvector![0.0, 0.0]);
    }

    #[test]
    fn rk4_matches_exponential_decay() {
        let spec = PlantSpec {
            field: VectorField::Linear { a: dmatrix![-1.0], b: dmatrix![0.0] },
            dt: 0.1,
            integrator: Integrator::Rk4,
            disturbance: vec![DisturbanceComponent::Zero],
        };
        let x = spec.discrete(&dvector![1.0], &dvector![0.0]);
        assert!((x[0] - (-0.1f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn rk4_and_euler_agree_to_second_order() {
        let mut rk = cubic_spring(true, vec![DisturbanceComponent::Zero; 2]);
        let mut eu = rk.clone();
        eu.integrator = Integrator::Euler;
        rk.integrator = Integrator::Rk4;
        let mut worst: f64 = 0.0;
        for i in -4..=4 {
            for j in -4..=4 {
                let x = dvector![i as f64 * 0.5, j as f64 * 0.5];
                let d = rk.discrete(&x, &dvector![0.0]) - eu.discrete(&x, &dvector![0.0]);
                worst = worst.max(d.amax());
            }
        }
        assert!(worst < 0.1 * 0.1 * 20.0, "{worst}");
        assert!(worst > 0.0);
    }

    #[test]
    fn literal_and_corrected_fields_differ() {
        let a = cubic_spring(false, uniform()).field.eval(&dvector![0.5, 1.0], &dvector![0.0]);
        let b = cubic_spring(true, uniform()).field.eval(&dvector![0.5, 1.0], &dvector![0.0]);
        assert_eq!(a[0], 0.5);
        assert_eq!(b[0], 1.0);
        assert_eq!(a[1], b[1]);
    }

    #[test]
    fn uniform_sample_mean() {
        let c = DisturbanceComponent::Uniform { lo: -0.1, hi: 0.1 };
        let mut rng = stream_rng(3, 0);
        let mean: f64 = (0..100_000).map(|_| c.sample(&mut rng)).sum::<f64>() / 1e5;
        assert!(mean.abs() < 0.002);
    }

    #[test]
    fn beta_sample_moments() {
        let c = DisturbanceComponent::BetaAffine { alpha: 100.0, beta: 100.0, scale: 1.0, shift: -0.5 };
        let mut rng = stream_rng(4, 0);
        let xs: Vec<f64> = (0..100_000).map(|_| c.sample(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        let want = (100.0f64 * 100.0 / (200.0f64.powi(2) * 201.0)).sqrt();
        assert!((var.sqrt() - want).abs() < 0.1 * want);
        assert!(mean.abs() < 1e-3);
        let (lo, hi) = c.bounds();
        assert!(xs.iter().all(|&x| x >= lo && x <= hi));
    }

    #[test]
    fn training_data_shapes_and_determinism() {
        let spec = cubic_spring(true, uniform());
        let proto = TrainingProtocol { n_traj: 1, traj_len: 1, init_std: 0.1, input_mean: 0.0, input_std: 1.0, safety_box: None };
        let d = generate_training_data(&spec, &proto, 5).unwrap();
        assert_eq!(d.dataset.len(), 1);
        let proto = TrainingProtocol { n_traj: 20, traj_len: 30, init_std: 1.5, input_mean: -7.0, input_std: 5.0, safety_box: Some(1.5) };
        let a = generate_training_data(&spec, &proto, 9).unwrap();
        let b = generate_training_data(&spec, &proto, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.dataset.x_next.iter().all(|x| x.amax() <= 1.5));
        let c = generate_training_data(&spec, &proto, 10).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn disturbance_data_inside_ball() {
        let spec = cubic_spring(true, uniform());
        let d = generate_disturbance_data(&spec, 1e-3, 330, 2).unwrap();
        assert_eq!(d.len(), 330);
        assert!(d.x.iter().all(|x| x.norm() <= 1e-3 + 1e-15));
        let exact = generate_disturbance_data(&spec, 0.0, 10, 2).unwrap();
        assert!(exact.x.iter().all(|x| x.amax() == 0.0));
        assert!(exact.x_next.iter().all(|w| spec.disturbance_support().contains(w, 0.0)));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = cubic_spring(true, uniform());
        s.dt = 0.0;
        assert!(s.validate().is_err());
        let s = cubic_spring(true, vec![DisturbanceComponent::Zero]);
        assert!(s.validate().is_err());
        let s = cubic_spring(true, vec![DisturbanceComponent::Uniform { lo: 1.0, hi: 0.0 }, DisturbanceComponent::Zero]);
        assert!(s.validate().is_err());
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let spec = cubic_spring(true, uniform());
        assert!(step(&spec, &dvector![f64::NAN, 0.0], &dvector![0.0], &mut stream_rng(0, 0)).is_err());
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = cubic_spring(true, vec![
            DisturbanceComponent::BetaAffine { alpha: 100.0, beta: 100.0, scale: 0.002, shift: -0.5 },
            DisturbanceComponent::Uniform { lo: -0.1, hi: 0.1 },
        ]);
        let text = toml::to_string(&spec).unwrap();
        let back: PlantSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}
