//! Least squares with iterated hard thresholding.
//!
//! Each target column is fit independently: solve on the active terms, zero
//! every coefficient below the magnitude threshold (and, optionally, below a
//! multiple of its standard error), refit on the survivors, and repeat until
//! the support stops changing.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityOptions {
    /// Coefficients with `|c| < threshold` are zeroed.
    pub threshold: f64,
    pub max_sweeps: usize,
    /// When set, coefficients with `|c| < min_t_stat · se(c)` are zeroed too.
    #[serde(default)]
    pub min_t_stat: Option<f64>,
}

impl SparsityOptions {
    pub fn new(threshold: f64, max_sweeps: usize) -> Self {
        Self {
            threshold,
            max_sweeps,
            min_t_stat: None,
        }
    }

    pub fn with_min_t_stat(mut self, t: f64) -> Self {
        self.min_t_stat = Some(t);
        self
    }
}

/// One thresholding sweep: mean-square loss with the freshly zeroed
/// coefficients, then after refitting on the survivors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepLoss {
    pub zeroed: f64,
    pub refit: f64,
}

#[derive(Clone, Debug)]
pub struct ColumnFit {
    pub coeffs: Vec<f64>,
    pub support: Vec<bool>,
    pub mse: f64,
    pub sweeps: Vec<SweepLoss>,
}

/// Least-squares problem `features · c ≈ targets[:, k]` for each column `k`.
pub struct SparseProblem<'a> {
    features: &'a DMatrix<f64>,
    targets: &'a DMatrix<f64>,
    gram: DMatrix<f64>,
    xty: DMatrix<f64>,
    names: Vec<String>,
}

impl<'a> SparseProblem<'a> {
    pub fn new(features: &'a DMatrix<f64>, targets: &'a DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if features.nrows() != targets.nrows() {
            return Err(Error::dims(features.nrows(), targets.nrows(), "target rows"));
        }
        if names.len() != features.ncols() {
            return Err(Error::dims(features.ncols(), names.len(), "term names"));
        }
        if features.nrows() <= features.ncols() {
            return Err(Error::arg(format!(
                "need more rows ({}) than terms ({})",
                features.nrows(),
                features.ncols()
            )));
        }
        let gram = features.tr_mul(features);
        let xty = features.tr_mul(targets);
        Ok(Self {
            features,
            targets,
            gram,
            xty,
            names,
        })
    }

    fn n(&self) -> usize {
        self.features.nrows()
    }

    fn mse(&self, col: usize, coeffs: &[f64]) -> f64 {
        let active: Vec<usize> = (0..coeffs.len()).filter(|&j| coeffs[j] != 0.0).collect();
        let mut rss = 0.0;
        for r in 0..self.n() {
            let pred: f64 = active.iter().map(|&j| self.features[(r, j)] * coeffs[j]).sum();
            let e = self.targets[(r, col)] - pred;
            rss += e * e;
        }
        rss / self.n() as f64
    }

    /// Solves on `active`; returns full-length coefficients and standard errors.
    fn solve(&self, col: usize, active: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
        let p = active.len();
        let idx: Vec<usize> = (0..p).filter(|&j| active[j]).collect();
        let mut coeffs = vec![0.0; p];
        let mut se = vec![0.0; p];
        if idx.is_empty() {
            return Ok((coeffs, se));
        }
        let k = idx.len();
        let singular = || Error::SingularFit {
            terms: idx.iter().map(|&j| self.names[j].clone()).collect(),
        };
        // equilibrate to unit diagonal before factoring
        let scale: Vec<f64> = idx.iter().map(|&j| self.gram[(j, j)].sqrt()).collect();
        if scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(singular());
        }
        let g = DMatrix::from_fn(k, k, |a, b| self.gram[(idx[a], idx[b])] / (scale[a] * scale[b]));
        let rhs = DVector::from_fn(k, |a, _| self.xty[(idx[a], col)] / scale[a]);
        let chol = g.cholesky().ok_or_else(singular)?;
        let l_diag_min = (0..k).map(|i| chol.l_dirty()[(i, i)]).fold(f64::INFINITY, f64::min);
        if l_diag_min < 1e-7 {
            return Err(singular());
        }
        let sol = chol.solve(&rhs);
        for (a, &j) in idx.iter().enumerate() {
            coeffs[j] = sol[a] / scale[a];
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(singular());
        }
        let dof = self.n().saturating_sub(k).max(1) as f64;
        let s2 = self.mse(col, &coeffs) * self.n() as f64 / dof;
        let inv = chol.inverse();
        for (a, &j) in idx.iter().enumerate() {
            se[j] = (s2 * inv[(a, a)]).max(0.0).sqrt() / scale[a];
        }
        Ok((coeffs, se))
    }

    /// Iterated hard-thresholding fit of target column `col`, starting from
    /// the full dictionary.
    pub fn fit_column(&self, col: usize, opts: &SparsityOptions) -> Result<ColumnFit> {
        self.fit_column_from(col, opts, vec![true; self.features.ncols()])
    }

    /// Same sweep, starting from a given support.
    pub fn fit_column_from(&self, col: usize, opts: &SparsityOptions, mut active: Vec<bool>) -> Result<ColumnFit> {
        let (mut coeffs, mut se) = self.solve(col, &active)?;
        let mut sweeps = Vec::new();
        for _ in 0..opts.max_sweeps {
            let keep: Vec<bool> = (0..coeffs.len())
                .map(|j| {
                    let c = coeffs[j].abs();
                    active[j]
                        && c >= opts.threshold
                        && opts.min_t_stat.map_or(true, |t| c >= t * se[j])
                })
                .collect();
            if keep == active {
                break;
            }
            let zeroed: Vec<f64> = coeffs
                .iter()
                .zip(&keep)
                .map(|(&c, &k)| if k { c } else { 0.0 })
                .collect();
            let zeroed_loss = self.mse(col, &zeroed);
            active = keep;
            (coeffs, se) = self.solve(col, &active)?;
            sweeps.push(SweepLoss {
                zeroed: zeroed_loss,
                refit: self.mse(col, &coeffs),
            });
        }
        let mse = self.mse(col, &coeffs);
        Ok(ColumnFit {
            support: active,
            coeffs,
            mse,
            sweeps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("t{j}")).collect()
    }

    #[test]
    fn exact_sparse_recovery() {
        let mut s = Stream::new(1, 0);
        let n = 200;
        let x = DMatrix::from_fn(n, 4, |_, _| s.uniform_range(-2.0, 2.0));
        let y = DMatrix::from_fn(n, 1, |r, _| 1.5 * x[(r, 1)] - 0.7 * x[(r, 3)]);
        let prob = SparseProblem::new(&x, &y, names(4)).unwrap();
        let fit = prob.fit_column(0, &SparsityOptions::new(0.05, 10)).unwrap();
        assert_eq!(fit.support, vec![false, true, false, true]);
        assert!((fit.coeffs[1] - 1.5).abs() < 1e-12);
        assert!((fit.coeffs[3] + 0.7).abs() < 1e-12);
        assert!(fit.mse < 1e-20);
    }

    #[test]
    fn singular_columns_are_named() {
        let n = 20;
        let x = DMatrix::from_fn(n, 3, |r, c| if c == 2 { 2.0 * r as f64 } else { r as f64 + c as f64 * 0.0 });
        let y = DMatrix::from_fn(n, 1, |r, _| r as f64);
        let prob = SparseProblem::new(&x, &y, names(3)).unwrap();
        match prob.fit_column(0, &SparsityOptions::new(0.0, 3)) {
            Err(Error::SingularFit { terms }) => assert_eq!(terms, names(3)),
            other => panic!("expected singular fit, got {other:?}"),
        }
    }

    #[test]
    fn refits_never_lose_to_plain_zeroing_and_sweep_is_idempotent() {
        let mut s = Stream::new(5, 0);
        let n = 500;
        let x = DMatrix::from_fn(n, 6, |_, c| if c == 0 { 1.0 } else { s.uniform_range(-1.0, 1.0) });
        let y = DMatrix::from_fn(n, 1, |r, _| 0.8 * x[(r, 2)] + 0.3 * s.normal());
        let prob = SparseProblem::new(&x, &y, names(6)).unwrap();
        let opts = SparsityOptions::new(0.1, 10);
        let fit = prob.fit_column(0, &opts).unwrap();
        assert!(!fit.sweeps.is_empty());
        for sw in &fit.sweeps {
            assert!(sw.refit >= 0.0 && sw.refit <= sw.zeroed + 1e-15);
        }
        let again = prob.fit_column_from(0, &opts, fit.support.clone()).unwrap();
        assert_eq!(again.coeffs, fit.coeffs);
        assert!(again.sweeps.is_empty());
    }
}
