//! Experiment configuration: TOML or JSON, validated before any stage runs.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::geometry::HPolytope;
use crate::io;
use crate::koopman::{Dictionary, DictionarySpec};
use crate::plant::{DisturbanceComponent, PlantSpec, TrainingProtocol};
use crate::tubes::MRPI_MAX_ITER;
use crate::uncertainty::RadiusRule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyConfig {
    pub lipschitz_lx: f64,
    /// Radius of the ball the disturbance-collection states are drawn from.
    pub epsilon_x: f64,
    /// Size of the disturbance data set.
    pub disturbance_samples: usize,
    pub epsilon_h: f64,
    pub delta_h: f64,
    /// Keep the origin inside the residual hull.
    #[serde(default = "yes")]
    pub include_origin: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroConfig {
    /// Risk level per state-constraint row.
    pub alpha: Vec<f64>,
    pub radius: RadiusRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintConfig {
    /// Chance constraints `P{Fx ≤ f} ≥ 1 − α`.
    #[serde(with = "io::rows")]
    pub f: DMatrix<f64>,
    pub f_rhs: Vec<f64>,
    /// Hard input constraints `Gu ≤ g`.
    #[serde(with = "io::rows")]
    pub g: DMatrix<f64>,
    pub g_rhs: Vec<f64>,
}

impl ConstraintConfig {
    pub fn state_polytope(&self) -> Result<HPolytope, HarnessError> {
        HPolytope::new(self.f.clone(), DVector::from_vec(self.f_rhs.clone()))
            .map_err(|e| HarnessError::Config(format!("state constraints: {e}")))
    }

    pub fn input_polytope(&self) -> Result<HPolytope, HarnessError> {
        HPolytope::new(self.g.clone(), DVector::from_vec(self.g_rhs.clone()))
            .map_err(|e| HarnessError::Config(format!("input constraints: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSettings {
    /// Diagonal state weight, on the original or the lifted state.
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub horizon: usize,
    #[serde(default = "default_mrpi")]
    pub mrpi_max_iter: usize,
}

fn default_mrpi() -> usize {
    MRPI_MAX_ITER
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub runs: usize,
    pub steps: usize,
    pub x0: Vec<f64>,
    /// Target satisfaction probability of each chance constraint.
    #[serde(default = "default_level")]
    pub chance_level: f64,
}

fn default_level() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub plant: PlantSpec,
    pub dictionary: DictionarySpec,
    pub training: TrainingProtocol,
    pub uncertainty: UncertaintyConfig,
    pub dro: DroConfig,
    pub constraints: ConstraintConfig,
    pub controller: ControllerSettings,
    pub montecarlo: MonteCarloConfig,
}

/// Parse TOML, or JSON when the file ends in `.json`.
pub fn load<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text, path.extension().and_then(|e| e.to_str()) == Some("json"))
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

pub fn parse<T: for<'de> Deserialize<'de>>(text: &str, json: bool) -> Result<T, String> {
    if json {
        serde_json::from_str(text).map_err(|e| e.to_string())
    } else {
        toml::from_str(text).map_err(|e| e.to_string())
    }
}

/// SHA-256 of the canonical JSON form.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let bytes = serde_json::to_vec(cfg).expect("configs serialize");
    hex::encode(Sha256::digest(bytes))
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), HarnessError> {
    if cond {
        Ok(())
    } else {
        Err(HarnessError::Config(msg()))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let cfg: Self = load(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn dictionary(&self) -> Result<Dictionary, HarnessError> {
        Dictionary::try_from(self.dictionary.clone()).map_err(|e| HarnessError::Config(format!("dictionary: {e}")))
    }

    pub fn q_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.controller.q_diag.clone()))
    }

    pub fn r_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.controller.r_diag.clone()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.plant.validate().map_err(|e| HarnessError::Config(format!("plant: {e}")))?;
        let (nx, nu) = (self.plant.n_x(), self.plant.n_u());
        let dict = self.dictionary()?;
        check(dict.n_x() == nx, || format!("dictionary has {} states, plant {nx}", dict.n_x()))?;
        let t = &self.training;
        check(t.n_traj > 0 && t.traj_len > 0, || "training needs trajectories".into())?;
        check(t.init_std > 0.0 && t.input_std > 0.0, || "training standard deviations must be positive".into())?;
        let u = &self.uncertainty;
        check(u.lipschitz_lx >= 0.0 && u.epsilon_x >= 0.0, || "L_x and ε_x must be nonnegative".into())?;
        check(u.disturbance_samples > 0, || "disturbance_samples must be positive".into())?;
        let c = &self.constraints;
        check(c.f.ncols() == nx && c.f.nrows() == c.f_rhs.len(), || "F must be rows×n_x with one rhs per row".into())?;
        check(c.g.ncols() == nu && c.g.nrows() == c.g_rhs.len(), || "G must be rows×n_u with one rhs per row".into())?;
        c.state_polytope()?;
        c.input_polytope()?;
        check(self.dro.alpha.len() == c.f.nrows(), || "one risk level per state constraint row".into())?;
        check(self.dro.alpha.iter().all(|&a| a > 0.0 && a < 1.0), || "risk levels must lie in (0, 1)".into())?;
        let k = &self.controller;
        check(k.horizon >= 1, || "horizon must be at least 1".into())?;
        check(k.q_diag.len() == nx || k.q_diag.len() == dict.len(), || {
            format!("q_diag has {} entries; expected {nx} or {}", k.q_diag.len(), dict.len())
        })?;
        check(k.q_diag.iter().all(|&v| v >= 0.0), || "Q must be PSD".into())?;
        check(k.r_diag.len() == nu && k.r_diag.iter().all(|&v| v > 0.0), || "R must be PD with n_u entries".into())?;
        let m = &self.montecarlo;
        check(m.runs > 0 && m.steps > 0, || "Monte-Carlo needs runs and steps".into())?;
        check(m.x0.len() == nx, || "x0 dimension".into())?;
        check(m.chance_level > 0.0 && m.chance_level < 1.0, || "chance_level in (0, 1)".into())?;
        Ok(())
    }
}

/// Sample-size by radius sweep of the backoff for one scalar distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityConfig {
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub distribution: DisturbanceComponent,
    pub alpha: f64,
    pub sample_sizes: Vec<usize>,
    pub radii: Vec<f64>,
}

impl SensitivityConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let cfg: Self = load(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        check(self.alpha > 0.0 && self.alpha < 1.0, || "alpha in (0, 1)".into())?;
        check(!self.sample_sizes.is_empty() && self.sample_sizes.iter().all(|&n| n > 0), || "sample sizes".into())?;
        check(!self.radii.is_empty() && self.radii.iter().all(|&r| r >= 0.0), || "radii".into())?;
        let (lo, hi) = self.distribution.bounds();
        check(hi > lo, || "distribution needs a nondegenerate support".into())
    }
}
