use std::path::Path;

use nalgebra::{dvector, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::SensitivityConfig;
use super::{io_err, HarnessError};
use crate::dro::{compute_backoff, DroInstance};
use crate::geometry::Box;
use crate::io::{format_float, Table};
use crate::plant::stream_rng;

/// Backoff `η` per sample size (rows) and radius (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub sample_sizes: Vec<usize>,
    pub radii: Vec<f64>,
    pub eta: Vec<Vec<f64>>,
    pub clamped: Vec<Vec<bool>>,
    pub support_bound: f64,
}

impl SensitivityTable {
    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        let mut header = vec!["samples".to_string()];
        header.extend(self.radii.iter().map(|r| format!("eta_r{}", format_float(*r))));
        let mut t = Table::new(header);
        for (n, row) in self.sample_sizes.iter().zip(&self.eta) {
            let mut r = vec![*n as f64];
            r.extend(row);
            t.push(r);
        }
        Ok(t.write_csv(path)?)
    }
}

/// One fresh sample set per sample size, shared by every radius in that row,
/// so differences along a row isolate the effect of the radius.
pub fn run_sensitivity(cfg: &SensitivityConfig, out: Option<&Path>) -> Result<SensitivityTable, HarnessError> {
    cfg.validate()?;
    let (lo, hi) = cfg.distribution.bounds();
    let support = Box::from_bounds(&dvector![lo], &dvector![hi])
        .map_err(|e| HarnessError::stage("sensitivity", e))?
        .to_hpolytope();
    let sample_sets: Vec<Vec<DVector<f64>>> = cfg
        .sample_sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let mut rng = stream_rng(cfg.seed, i as u64);
            (0..n).map(|_| dvector![cfg.distribution.sample(&mut rng)]).collect()
        })
        .collect();
    let cells: Vec<(usize, usize)> =
        (0..cfg.sample_sizes.len()).flat_map(|i| (0..cfg.radii.len()).map(move |j| (i, j))).collect();
    let results = cells
        .par_iter()
        .map(|&(i, j)| {
            let inst = DroInstance::new(dvector![1.0], sample_sets[i].clone(), support.clone(), cfg.alpha, cfg.radii[j])?;
            compute_backoff(&inst)
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| HarnessError::stage("sensitivity", e))?;
    let nr = cfg.radii.len();
    let table = SensitivityTable {
        sample_sizes: cfg.sample_sizes.clone(),
        radii: cfg.radii.clone(),
        eta: results.chunks(nr).map(|row| row.iter().map(|b| b.eta).collect()).collect(),
        clamped: results.chunks(nr).map(|row| row.iter().map(|b| b.clamped).collect()).collect(),
        support_bound: hi,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        table.write_csv(&dir.join("sensitivity.csv"))?;
    }
    Ok(table)
}
