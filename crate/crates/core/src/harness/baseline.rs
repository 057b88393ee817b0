use nalgebra::DVector;

use super::{Bundle, HarnessError};
use crate::controller::Controller;
use crate::geometry::SupportFunction;
use crate::tubes::{build_tubes, TubeSet};

/// Worst-case backoffs `η_j = h_{Ŵ_w}(F_j)` in place of the CVaR ones.
pub fn robust_backoffs(bundle: &Bundle) -> Result<DVector<f64>, HarnessError> {
    let f = &bundle.config.constraints.f;
    let w = &bundle.disturbance.support_box;
    (0..f.nrows())
        .map(|j| w.support(&f.row(j).transpose()).map_err(|e| HarnessError::stage("baseline", e)))
        .collect::<Result<Vec<_>, _>>()
        .map(DVector::from_vec)
}

pub struct RobustBaseline {
    pub eta: DVector<f64>,
    pub tubes: TubeSet,
    pub controller: Controller,
}

/// Same model, gain and error sets as the bundle, tubes rebuilt with the
/// robust backoffs.
pub fn robust_baseline(bundle: &Bundle) -> Result<RobustBaseline, HarnessError> {
    let eta = robust_backoffs(bundle)?;
    let tubes = build_tubes(&bundle.tube_problem(eta.clone())?).map_err(|e| HarnessError::stage("baseline", e))?;
    let controller = Controller::new(bundle.model.clone(), bundle.synthesis.clone(), tubes.clone())
        .map_err(|e| HarnessError::stage("baseline", e))?;
    Ok(RobustBaseline { eta, tubes, controller })
}
