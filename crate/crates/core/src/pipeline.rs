//! The experiment stages as in-memory functions of a recipe.

use serde::{Deserialize, Serialize};

use crate::autosde::{make_windows, run_algorithm1, Algorithm1Output, WindowDataset};
use crate::basis::BasisDictionary;
use crate::config::{DriftChoice, ExperimentConfig};
use crate::error::{Error, Result};
use crate::evaluate::{
    compare_distributions, noise_sweep, paired_ensembles, track_trajectory, ComparisonReport, SweepReport,
    TrackingReport,
};
use crate::km::{self, EstimatedSde};
use crate::manifold::{build_reduced, fit_manifold, DriftSource, ManifoldFit, ReducedSystem};
use crate::neural::AutoSdeModel;
use crate::sde::{coarse_grain, simulate_ensemble, truncate, Ensemble, Snapshot};

/// Simulates the recipe's ensemble on the fine grid.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Ensemble> {
    let sys = cfg.system.build()?;
    let s = &cfg.simulation;
    simulate_ensemble(&sys, &s.sampler(), s.n_traj, s.dt, s.n_steps, s.seed)
}

/// Identifies the slow drift and diffusion from the first
/// `identification.window_steps` steps of every trajectory.
pub fn identify(cfg: &ExperimentConfig, ensemble: &Ensemble) -> Result<EstimatedSde> {
    let id = &cfg.identification;
    let data = match id.window_steps {
        Some(k) if k < ensemble.n_steps() => truncate(ensemble, k)?,
        _ => ensemble.clone(),
    };
    let dict = BasisDictionary::new(ensemble.dim(), id.degree, id.kind)?;
    km::identify(&data, &dict, &cfg.slow_dims(), &id.sparsity())
}

/// Windows of the coarse-grained ensemble.
pub fn training_windows(cfg: &ExperimentConfig, ensemble: &Ensemble) -> Result<WindowDataset> {
    make_windows(&coarse_grain(ensemble, cfg.simulation.stride)?)
}

/// Fresh network normalized by the moments of the initial windows.
pub fn initial_model(cfg: &ExperimentConfig, dataset: &WindowDataset) -> Result<AutoSdeModel> {
    let (mean, std) = dataset.moments();
    let scale = std.into_iter().map(|s| if s > 0.0 { s } else { 1.0 }).collect();
    let arch = cfg.network.architecture(dataset.dim(), cfg.system.slow_dim());
    AutoSdeModel::new(arch, mean, scale, cfg.training.seed)
}

pub fn train(cfg: &ExperimentConfig, ensemble: &Ensemble, esde: &EstimatedSde) -> Result<Algorithm1Output> {
    let sys = cfg.system.build()?;
    let dataset = training_windows(cfg, ensemble)?;
    let model = initial_model(cfg, &dataset)?;
    run_algorithm1(dataset, esde, &sys, model, &cfg.training)
}

/// Noise vector of the reduced system for the configured drift source.
pub fn reduced_sigma(cfg: &ExperimentConfig, esde: &EstimatedSde) -> Vec<f64> {
    match cfg.evaluation.drift {
        DriftChoice::Estimated => esde.sigma_constant(),
        DriftChoice::Known => cfg.system.sigma_slow.clone(),
    }
}

/// Fits `ĥ` to the converged snapshot and composes the reduced system.
pub fn reduce(cfg: &ExperimentConfig, snapshot: &Snapshot, esde: &EstimatedSde) -> Result<(ManifoldFit, ReducedSystem)> {
    let manifold = fit_manifold(snapshot, &cfg.slow_dims(), &cfg.manifold)?;
    let reduced = reduced_system(cfg, manifold.clone(), esde)?;
    Ok((manifold, reduced))
}

/// Composes the reduced system from an already fitted manifold.
pub fn reduced_system(cfg: &ExperimentConfig, manifold: ManifoldFit, esde: &EstimatedSde) -> Result<ReducedSystem> {
    let source = match cfg.evaluation.drift {
        DriftChoice::Estimated => DriftSource::Estimated(esde.clone()),
        DriftChoice::Known => DriftSource::Known(cfg.system.build()?),
    };
    build_reduced(source, manifold, reduced_sigma(cfg, esde))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub z0: Vec<f64>,
    pub comparison: ComparisonReport,
    pub tracking: TrackingReport,
    pub sweep: SweepReport,
}

/// Distribution comparison, shared-noise tracking and the noise sweep, all
/// started from `(x0, ĥ(x0))`.
pub fn evaluate(cfg: &ExperimentConfig, reduced: &ReducedSystem) -> Result<EvaluationReport> {
    let e = &cfg.evaluation;
    let sys = cfg.system.build()?;
    let z0 = reduced.manifold().lift(&e.x0)?;
    let horizon = *e.time_indices.iter().max().ok_or_else(|| Error::Empty("time indices".into()))?;
    let (red, orig) = paired_ensembles(reduced, &sys, &z0, e.n_samples, e.dt, horizon.max(1), e.seed)?;
    let comparison = compare_distributions(&red, &orig, &cfg.slow_dims(), &e.time_indices)?;
    let tracking = track_trajectory(reduced, &sys, &cfg.slow_dims(), &z0, e.dt, e.track_steps, e.seed)?;
    let sweep = noise_sweep(reduced, &sys, &z0, &e.sigma_sweep, e.dt, e.sweep_time_index, e.n_samples, e.seed)?;
    Ok(EvaluationReport {
        z0,
        comparison,
        tracking,
        sweep,
    })
}
