use std::path::Path;

use log::{info, warn};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::{io_err, HarnessError};
use crate::controller::{synthesize, Controller, Synthesis};
use crate::dro::{backoff_vector, BackoffResult};
use crate::geometry::Box;
use crate::koopman::{fit_edmd, LiftedModel};
use crate::plant::{generate_disturbance_data, generate_training_data, stream_rng};
use crate::tubes::{build_tubes, error_limit_box, verify_invariance, InvarianceReport, TubeProblem, TubeSet};
use crate::uncertainty::{
    estimate_disturbances, extract_model_errors, hoeffding_certificate, wasserstein_radius, DisturbanceEstimate,
    HoeffdingCert,
};

/// Sub-seeds derived from the experiment seed.
pub(crate) const DISTURBANCE_SEED_OFFSET: u64 = 1;
pub(crate) const MONTECARLO_SEED_OFFSET: u64 = 2;
const INVARIANCE_SEED_OFFSET: u64 = 3;
const INVARIANCE_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub samples: usize,
    pub truncated_trajectories: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    /// `W̄`.
    pub total_hull: Box,
    /// `𝔻`.
    pub model_error: Box,
    pub clamped: Vec<usize>,
}

/// Everything the offline stages produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub training: TrainingSummary,
    pub hoeffding: HoeffdingCert,
    pub model: LiftedModel,
    pub disturbance: DisturbanceEstimate,
    pub errors: ErrorSummary,
    /// Wasserstein radius used for the backoffs.
    pub radius: f64,
    pub backoffs: Vec<BackoffResult>,
    pub synthesis: Synthesis,
    pub tubes: TubeSet,
    pub invariance: InvarianceReport,
    /// Box around `C R_∞`, the limit set of the closed-loop error.
    pub limit_box: Box,
}

impl Bundle {
    pub fn eta(&self) -> DVector<f64> {
        DVector::from_iterator(self.backoffs.len(), self.backoffs.iter().map(|b| b.eta))
    }

    /// Seed for the closed-loop runs, distinct from the data seeds.
    pub fn montecarlo_seed(&self) -> u64 {
        self.seed.wrapping_add(MONTECARLO_SEED_OFFSET)
    }

    pub fn controller(&self) -> Result<Controller, HarnessError> {
        Controller::new(self.model.clone(), self.synthesis.clone(), self.tubes.clone())
            .map_err(|e| HarnessError::stage("controller", e))
    }

    pub fn tube_problem(&self, eta: DVector<f64>) -> Result<TubeProblem, HarnessError> {
        tube_problem(&self.config, &self.model, &self.synthesis, &self.errors.model_error, &self.disturbance.support_box, eta)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serializes")
    }

    pub fn write(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_json()).map_err(|e| io_err(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }
}

pub(crate) fn tube_problem(
    cfg: &ExperimentConfig,
    model: &LiftedModel,
    synthesis: &Synthesis,
    model_error: &Box,
    disturbance: &Box,
    eta: DVector<f64>,
) -> Result<TubeProblem, HarnessError> {
    Ok(TubeProblem {
        phi: synthesis.phi.clone(),
        k: synthesis.k.clone(),
        c: model.c.clone(),
        d: model.d.clone(),
        state_constraints: cfg.constraints.state_polytope()?,
        input_constraints: cfg.constraints.input_polytope()?,
        eta,
        model_error: model_error.clone(),
        disturbance: disturbance.clone(),
        horizon: cfg.controller.horizon,
        max_iter: cfg.controller.mrpi_max_iter,
    })
}

/// Runs every offline stage. When `out` is given, the data sets are written
/// there as CSV.
pub fn run_pipeline(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Bundle, HarnessError> {
    cfg.validate()?;
    let seed = cfg.seed;
    let data = generate_training_data(&cfg.plant, &cfg.training, seed).map_err(|e| HarnessError::stage("data", e))?;
    info!("training data: {} samples ({} trajectories truncated)", data.dataset.len(), data.truncated_trajectories);
    let u = &cfg.uncertainty;
    let pairs = generate_disturbance_data(
        &cfg.plant,
        u.epsilon_x,
        u.disturbance_samples,
        seed.wrapping_add(DISTURBANCE_SEED_OFFSET),
    )
    .map_err(|e| HarnessError::stage("data", e))?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        data.dataset.write_csv(&dir.join("training.csv")).map_err(|e| HarnessError::stage("data", e))?;
        pairs.write_csv(&dir.join("disturbance.csv")).map_err(|e| HarnessError::stage("data", e))?;
    }

    let model = fit_edmd(&cfg.dictionary()?, &data.dataset).map_err(|e| HarnessError::stage("fit", e))?;
    let hoeffding = hoeffding_certificate(u.epsilon_h, u.delta_h, data.dataset.len())
        .map_err(|e| HarnessError::stage("uncertainty", e))?;
    if !hoeffding.valid {
        warn!("{} training samples, fewer than the {} the hull certificate asks for", hoeffding.actual_n, hoeffding.required_n);
    }
    let disturbance =
        estimate_disturbances(&pairs, u.lipschitz_lx, u.epsilon_x).map_err(|e| HarnessError::stage("uncertainty", e))?;
    let errors = extract_model_errors(&model, &data.dataset, &disturbance, u.include_origin)
        .map_err(|e| HarnessError::stage("uncertainty", e))?;
    let radius = wasserstein_radius(cfg.dro.radius, u.lipschitz_lx, u.epsilon_x, pairs.len(), cfg.plant.n_x())
        .map_err(|e| HarnessError::stage("uncertainty", e))?;

    let alpha = DVector::from_vec(cfg.dro.alpha.clone());
    let backoffs =
        backoff_vector(&cfg.constraints.f, &alpha, &disturbance, radius).map_err(|e| HarnessError::stage("dro", e))?;
    for (j, b) in backoffs.iter().enumerate() {
        info!("backoff row {j}: η = {:.6} (support {:.6}{})", b.eta, b.support_bound, if b.clamped { ", clamped" } else { "" });
    }

    let synthesis =
        synthesize(&model, &cfg.q_matrix(), &cfg.r_matrix()).map_err(|e| HarnessError::stage("synthesis", e))?;
    info!("closed-loop spectral radius {:.4}", synthesis.spectral_radius);

    let eta = DVector::from_iterator(backoffs.len(), backoffs.iter().map(|b| b.eta));
    let problem = tube_problem(cfg, &model, &synthesis, &errors.model_error, &disturbance.support_box, eta)?;
    let tubes = build_tubes(&problem).map_err(|e| HarnessError::stage("tubes", e))?;
    info!("terminal set: {} rows after {} iterations", tubes.terminal.nrows(), tubes.terminal_iterations);
    let mut rng = stream_rng(seed.wrapping_add(INVARIANCE_SEED_OFFSET), 0);
    let invariance = verify_invariance(&tubes.terminal, &tubes.phi, &tubes.terminal_disturbance, INVARIANCE_SAMPLES, &mut rng)
        .map_err(|e| HarnessError::stage("tubes", e))?;
    if invariance.violations > 0 {
        return Err(HarnessError::stage("tubes", format!("terminal set not invariant: {invariance:?}")));
    }
    let limit_box =
        error_limit_box(&tubes.phi, &tubes.total_error, &model.c).map_err(|e| HarnessError::stage("tubes", e))?;
    let bundle = Bundle {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        seed,
        training: TrainingSummary { samples: data.dataset.len(), truncated_trajectories: data.truncated_trajectories },
        hoeffding,
        model,
        disturbance,
        errors: ErrorSummary { total_hull: errors.total_hull, model_error: errors.model_error, clamped: errors.clamped },
        radius,
        backoffs,
        synthesis,
        tubes,
        invariance,
        limit_box,
    };
    bundle.controller()?;
    Ok(bundle)
}
