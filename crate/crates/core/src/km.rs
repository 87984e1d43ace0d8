//! Drift and squared-diffusion identification from short-term ensembles.
//!
//! For consecutive samples `Z_i, Z_{i+1}` of a path the conditional moments
//!
//! ```text
//! E[(Z_{i+1} − Z_i)/Δt   | Z_i = z] → f(z)
//! E[(Z_{i+1} − Z_i)²/Δt  | Z_i = z] → σ²(z)
//! ```
//!
//! turn identification into two linear regressions over a polynomial
//! dictionary `Θ(z)`, solved by sparse least squares.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{convert_coefficients, BasisDictionary, BasisKind};
use crate::error::{Error, Result};
use crate::regression::{SparseProblem, SparsityOptions, SweepLoss};
use crate::sde::Ensemble;

/// Regression data: features at `Z_i` and the two difference-quotient targets.
#[derive(Clone, Debug)]
pub struct KmTargets {
    pub features: DMatrix<f64>,
    pub drift_targets: DMatrix<f64>,
    pub diff_targets: DMatrix<f64>,
    pub dict: BasisDictionary,
    pub identified_dims: Vec<usize>,
}

impl KmTargets {
    pub fn n_pairs(&self) -> usize {
        self.features.nrows()
    }
}

/// Pools every consecutive pair of every trajectory into regression rows.
pub fn build_km_targets(
    ensemble: &Ensemble,
    dict: &BasisDictionary,
    identified_dims: &[usize],
) -> Result<KmTargets> {
    let n_dim = ensemble.dim();
    if dict.dim != n_dim {
        return Err(Error::dims(n_dim, dict.dim, "dictionary dimension vs state dimension"));
    }
    if ensemble.n_steps() < 1 {
        return Err(Error::arg("identification needs at least two time rows"));
    }
    if identified_dims.is_empty() {
        return Err(Error::arg("no identified dimensions"));
    }
    if let Some(&d) = identified_dims.iter().find(|&&d| d >= n_dim) {
        return Err(Error::OutOfRange { index: d, max: n_dim - 1 });
    }
    let pairs = ensemble.n_steps();
    let rows = ensemble.len() * pairs;
    let p = dict.len();
    let k = identified_dims.len();
    let dt = ensemble.dt();
    let mut features = DMatrix::zeros(rows, p);
    let mut drift_targets = DMatrix::zeros(rows, k);
    let mut diff_targets = DMatrix::zeros(rows, k);
    let mut z = vec![0.0; n_dim];
    let mut theta = vec![0.0; p];
    for (t_idx, traj) in ensemble.trajectories().iter().enumerate() {
        for i in 0..pairs {
            let r = t_idx * pairs + i;
            for c in 0..n_dim {
                z[c] = traj.states[(i, c)];
            }
            dict.evaluate_into(&z, &mut theta)?;
            for (j, v) in theta.iter().enumerate() {
                features[(r, j)] = *v;
            }
            for (a, &d) in identified_dims.iter().enumerate() {
                let inc = traj.states[(i + 1, d)] - traj.states[(i, d)];
                drift_targets[(r, a)] = inc / dt;
                diff_targets[(r, a)] = inc * inc / dt;
            }
        }
    }
    Ok(KmTargets {
        features,
        drift_targets,
        diff_targets,
        dict: dict.clone(),
        identified_dims: identified_dims.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    #[serde(rename = "L_drift")]
    pub l_drift: f64,
    #[serde(rename = "L_diffusion")]
    pub l_diffusion: f64,
    pub n_pairs: usize,
    pub drift_sweeps: Vec<Vec<SweepLoss>>,
    pub diffusion_sweeps: Vec<Vec<SweepLoss>>,
}

/// Identified SDE: `drift = θ¹ᵀΘ(z)`, `σ² = θ²ᵀΘ(z)` per identified dim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatedSde {
    pub dict: BasisDictionary,
    #[serde(with = "crate::serde_rows")]
    pub theta_drift: DMatrix<f64>,
    #[serde(with = "crate::serde_rows")]
    pub theta_diff2: DMatrix<f64>,
    pub identified_dims: Vec<usize>,
    pub threshold: f64,
    pub sparsity: SparsityOptions,
    pub fit_diagnostics: FitDiagnostics,
}

pub fn fit_sde(targets: &KmTargets, opts: &SparsityOptions) -> Result<EstimatedSde> {
    let p = targets.dict.len();
    let k = targets.identified_dims.len();
    if targets.n_pairs() <= p {
        return Err(Error::arg(format!(
            "{} regression rows cannot determine {p} terms",
            targets.n_pairs()
        )));
    }
    let names = default_term_names(&targets.dict);
    let drift = SparseProblem::new(&targets.features, &targets.drift_targets, names.clone())?;
    let diff = SparseProblem::new(&targets.features, &targets.diff_targets, names)?;
    let mut theta_drift = DMatrix::zeros(p, k);
    let mut theta_diff2 = DMatrix::zeros(p, k);
    let (mut l_drift, mut l_diffusion) = (0.0, 0.0);
    let mut drift_sweeps = Vec::with_capacity(k);
    let mut diffusion_sweeps = Vec::with_capacity(k);
    for a in 0..k {
        let fd = drift.fit_column(a, opts)?;
        let fs = diff.fit_column(a, opts)?;
        for j in 0..p {
            theta_drift[(j, a)] = fd.coeffs[j];
            theta_diff2[(j, a)] = fs.coeffs[j];
        }
        l_drift += fd.mse / k as f64;
        l_diffusion += fs.mse / k as f64;
        drift_sweeps.push(fd.sweeps);
        diffusion_sweeps.push(fs.sweeps);
    }
    Ok(EstimatedSde {
        dict: targets.dict.clone(),
        theta_drift,
        theta_diff2,
        identified_dims: targets.identified_dims.clone(),
        threshold: opts.threshold,
        sparsity: *opts,
        fit_diagnostics: FitDiagnostics {
            l_drift,
            l_diffusion,
            n_pairs: targets.n_pairs(),
            drift_sweeps,
            diffusion_sweeps,
        },
    })
}

/// Variable names `z1..zN` used when nothing better is known.
pub fn default_var_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("z{i}")).collect()
}

fn default_term_names(dict: &BasisDictionary) -> Vec<String> {
    dict.term_names(&default_var_names(dict.dim))
}

impl EstimatedSde {
    pub fn state_dim(&self) -> usize {
        self.dict.dim
    }

    /// Drift of the identified coordinates at `z`, written into `out`.
    pub fn drift_into(&self, z: &[f64], theta: &mut [f64], out: &mut [f64]) -> Result<()> {
        self.dict.evaluate_into(z, theta)?;
        for (a, o) in out.iter_mut().enumerate() {
            *o = theta.iter().enumerate().map(|(j, t)| self.theta_drift[(j, a)] * t).sum();
        }
        Ok(())
    }

    /// `(drift, σ)` per identified coordinate, with `σ = √max(θ²ᵀΘ(z), 0)`.
    pub fn eval(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let theta = self.dict.evaluate(z)?;
        let k = self.identified_dims.len();
        let dot = |m: &DMatrix<f64>, a: usize| -> f64 { theta.iter().enumerate().map(|(j, t)| m[(j, a)] * t).sum() };
        let drift = (0..k).map(|a| dot(&self.theta_drift, a)).collect();
        let sigma = (0..k).map(|a| dot(&self.theta_diff2, a).max(0.0).sqrt()).collect();
        Ok((drift, sigma))
    }

    /// `σ` implied by the constant term of `θ²` alone, per identified dim.
    pub fn sigma_constant(&self) -> Vec<f64> {
        // the constant monomial is the first term; Hermite terms also carry constants
        let mono = self.to_monomial().unwrap_or_else(|_| self.clone());
        (0..self.identified_dims.len())
            .map(|a| mono.theta_diff2[(0, a)].max(0.0).sqrt())
            .collect()
    }

    /// Coefficients re-expressed over the monomial dictionary.
    pub fn to_monomial(&self) -> Result<EstimatedSde> {
        if self.dict.kind == BasisKind::Monomial {
            return Ok(self.clone());
        }
        let mono = BasisDictionary::new(self.dict.dim, self.dict.degree, BasisKind::Monomial)?;
        let convert = |m: &DMatrix<f64>| -> Result<DMatrix<f64>> {
            let mut out = DMatrix::zeros(m.nrows(), m.ncols());
            for a in 0..m.ncols() {
                let col: Vec<f64> = m.column(a).iter().copied().collect();
                let c = convert_coefficients(&self.dict, &mono, &col)?;
                for (j, v) in c.into_iter().enumerate() {
                    out[(j, a)] = v;
                }
            }
            Ok(out)
        };
        Ok(EstimatedSde {
            theta_drift: convert(&self.theta_drift)?,
            theta_diff2: convert(&self.theta_diff2)?,
            dict: mono,
            ..self.clone()
        })
    }

    /// Rows `(term, drift per dim, σ² per dim)` in the monomial basis.
    pub fn table(&self, var_names: &[String]) -> Result<Vec<(String, Vec<f64>, Vec<f64>)>> {
        let mono = self.to_monomial()?;
        let names = mono.dict.term_names(var_names);
        Ok(names
            .into_iter()
            .enumerate()
            .map(|(j, name)| {
                let d = mono.theta_drift.row(j).iter().copied().collect();
                let s = mono.theta_diff2.row(j).iter().copied().collect();
                (name, d, s)
            })
            .collect())
    }
}

/// Convenience wrapper: pooled targets then sparse fit.
pub fn identify(
    ensemble: &Ensemble,
    dict: &BasisDictionary,
    identified_dims: &[usize],
    opts: &SparsityOptions,
) -> Result<EstimatedSde> {
    let targets = build_km_targets(ensemble, dict, identified_dims)?;
    fit_sde(&targets, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use crate::sde::{simulate_ensemble, simulate_trajectory, InitRange, InitSampler, SlowFastSystem, Trajectory};
    use crate::sde::{FnField, PolynomialField};
    use std::sync::Arc;

    fn mono(dim: usize) -> BasisDictionary {
        BasisDictionary::new(dim, 2, BasisKind::Monomial).unwrap()
    }

    #[test]
    fn pair_counts_and_constant_targets() {
        let sys = SlowFastSystem::example1(1.0, 0.1, 0.01);
        let t = simulate_trajectory(&sys, &[1.0, 1.0], 1e-3, 10, &mut Stream::new(0, 0)).unwrap();
        let e = Ensemble::new(vec![t], 0).unwrap();
        let tg = build_km_targets(&e, &mono(2), &[0]).unwrap();
        assert_eq!(tg.n_pairs(), 10);
        assert_eq!(tg.features.ncols(), 6);

        let flat = Trajectory {
            t0: 0.0,
            dt: 0.1,
            states: DMatrix::from_element(5, 2, 3.0),
        };
        let e = Ensemble::new(vec![flat], 0).unwrap();
        let tg = build_km_targets(&e, &mono(2), &[0, 1]).unwrap();
        assert!(tg.drift_targets.iter().all(|v| *v == 0.0));
        assert!(tg.diff_targets.iter().all(|v| *v == 0.0));

        let single = Trajectory {
            t0: 0.0,
            dt: 0.1,
            states: DMatrix::from_element(1, 2, 3.0),
        };
        let e = Ensemble::new(vec![single], 0).unwrap();
        assert!(build_km_targets(&e, &mono(2), &[0]).is_err());
    }

    #[test]
    fn noiseless_linear_growth_is_recovered() {
        // dx = x dt with an inert fast coordinate; exact Euler data
        let sys = SlowFastSystem::new(
            1.0,
            Arc::new(FnField::new(1, |x, _, o| o[0] = x[0])),
            Arc::new(PolynomialField::zero(2, 1)),
            vec![0.0],
            vec![0.0],
        )
        .unwrap();
        let init = InitSampler(vec![InitRange::uniform(-2.0, 2.0), InitRange::uniform(-2.0, 2.0)]);
        let e = simulate_ensemble(&sys, &init, 50, 1e-3, 10, 1).unwrap();
        let est = identify(&e, &mono(2), &[0], &SparsityOptions::new(0.05, 10)).unwrap();
        for j in 0..6 {
            let want = if j == 1 { 1.0 } else { 0.0 };
            assert!((est.theta_drift[(j, 0)] - want).abs() < 1e-9, "term {j}: {}", est.theta_drift[(j, 0)]);
        }
        // squared increments are (x dt)²/dt = O(dt): below the threshold
        assert!(est.theta_diff2.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn evaluation_contract() {
        let dict = mono(2);
        let mut est = EstimatedSde {
            dict: dict.clone(),
            theta_drift: DMatrix::zeros(6, 1),
            theta_diff2: DMatrix::zeros(6, 1),
            identified_dims: vec![0],
            threshold: 0.05,
            sparsity: SparsityOptions::new(0.05, 10),
            fit_diagnostics: FitDiagnostics {
                l_drift: 0.0,
                l_diffusion: 0.0,
                n_pairs: 0,
                drift_sweeps: vec![],
                diffusion_sweeps: vec![],
            },
        };
        assert_eq!(est.eval(&[0.3, -0.2]).unwrap(), (vec![0.0], vec![0.0]));
        est.theta_drift[(1, 0)] = 0.9821;
        est.theta_drift[(4, 0)] = -1.0078;
        est.theta_diff2[(0, 0)] = 1.0315;
        let (d, s) = est.eval(&[1.0, 1.0]).unwrap();
        assert!((d[0] + 0.0257).abs() < 1e-12);
        assert!((s[0] - 1.0315f64.sqrt()).abs() < 1e-12);
        est.theta_diff2[(3, 0)] = -1.0;
        let (_, s) = est.eval(&[3.0, 0.0]).unwrap();
        assert_eq!(s[0], 0.0);
        assert!(est.eval(&[1.0]).is_err());
    }
}
