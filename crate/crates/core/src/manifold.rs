//! Slow-manifold fitting, the reduced slow SDE, and a POD baseline.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisDictionary, BasisKind};
use crate::error::{Error, Result};
use crate::km::EstimatedSde;
use crate::regression::{SparseProblem, SparsityOptions};
use crate::rng::Stream;
use crate::sde::{simulate_trajectory, Dynamics, SlowFastSystem, Snapshot, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldOptions {
    pub degree: u32,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_sweeps")]
    pub max_sweeps: usize,
    /// Only points whose slow coordinates lie in these `[lo, hi]` boxes are
    /// used for the fit.
    #[serde(default)]
    pub domain: Option<Vec<[f64; 2]>>,
}

fn default_threshold() -> f64 {
    0.01
}

fn default_sweeps() -> usize {
    10
}

impl ManifoldOptions {
    pub fn new(degree: u32) -> Self {
        Self {
            degree,
            threshold: default_threshold(),
            max_sweeps: default_sweeps(),
            domain: None,
        }
    }
}

/// `y = ĥ(x)`: each fast coordinate as a polynomial in the slow ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldFit {
    pub slow_dims: Vec<usize>,
    pub fast_dims: Vec<usize>,
    pub dict: BasisDictionary,
    #[serde(with = "crate::serde_rows")]
    pub coeffs: DMatrix<f64>,
    pub residual_rms: f64,
    pub n_points: usize,
    pub snapshot_time_index: usize,
    pub options: ManifoldOptions,
}

impl ManifoldFit {
    pub fn state_dim(&self) -> usize {
        self.slow_dims.len() + self.fast_dims.len()
    }

    /// `ĥ(x)` for slow coordinates `x`.
    pub fn eval_into(&self, x: &[f64], theta: &mut [f64], out: &mut [f64]) -> Result<()> {
        self.dict.evaluate_into(x, theta)?;
        for (a, o) in out.iter_mut().enumerate() {
            *o = theta.iter().enumerate().map(|(j, t)| self.coeffs[(j, a)] * t).sum();
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut theta = vec![0.0; self.dict.len()];
        let mut out = vec![0.0; self.fast_dims.len()];
        self.eval_into(x, &mut theta, &mut out)?;
        Ok(out)
    }

    /// The full state `(x, ĥ(x))` laid out by dimension index.
    pub fn lift(&self, x: &[f64]) -> Result<Vec<f64>> {
        let h = self.eval(x)?;
        let mut z = vec![0.0; self.state_dim()];
        for (&d, v) in self.slow_dims.iter().zip(x) {
            z[d] = *v;
        }
        for (&d, v) in self.fast_dims.iter().zip(&h) {
            z[d] = *v;
        }
        Ok(z)
    }

    /// Rows `(term, coefficient per fast dim)`.
    pub fn table(&self, slow_names: &[String]) -> Vec<(String, Vec<f64>)> {
        self.dict
            .term_names(slow_names)
            .into_iter()
            .enumerate()
            .map(|(j, n)| (n, self.coeffs.row(j).iter().copied().collect()))
            .collect()
    }
}

/// Regresses every non-slow coordinate of `snapshot` onto a monomial
/// dictionary over the slow coordinates, with the same threshold-and-refit
/// sweep as SDE identification.
pub fn fit_manifold(snapshot: &Snapshot, slow_dims: &[usize], opts: &ManifoldOptions) -> Result<ManifoldFit> {
    let n_dim = snapshot.dim();
    if slow_dims.is_empty() || slow_dims.len() >= n_dim {
        return Err(Error::arg("need at least one slow and one fast dimension"));
    }
    if let Some(&d) = slow_dims.iter().find(|&&d| d >= n_dim) {
        return Err(Error::OutOfRange { index: d, max: n_dim - 1 });
    }
    let fast_dims: Vec<usize> = (0..n_dim).filter(|d| !slow_dims.contains(d)).collect();
    if let Some(dom) = &opts.domain {
        if dom.len() != slow_dims.len() {
            return Err(Error::dims(slow_dims.len(), dom.len(), "manifold domain boxes"));
        }
    }
    let inside = |r: usize| match &opts.domain {
        Some(dom) => slow_dims
            .iter()
            .zip(dom)
            .all(|(&d, [lo, hi])| (*lo..=*hi).contains(&snapshot.points[(r, d)])),
        None => true,
    };
    let rows: Vec<usize> = (0..snapshot.n_samples()).filter(|&r| inside(r)).collect();
    let dict = BasisDictionary::new(slow_dims.len(), opts.degree, BasisKind::Monomial)?;
    let p = dict.len();
    if rows.len() <= p {
        return Err(Error::arg(format!("{} points cannot determine {p} manifold terms", rows.len())));
    }
    let mut features = DMatrix::zeros(rows.len(), p);
    let mut theta = vec![0.0; p];
    let mut x = vec![0.0; slow_dims.len()];
    for (i, &r) in rows.iter().enumerate() {
        for (a, &d) in slow_dims.iter().enumerate() {
            x[a] = snapshot.points[(r, d)];
        }
        dict.evaluate_into(&x, &mut theta)?;
        for (j, t) in theta.iter().enumerate() {
            features[(i, j)] = *t;
        }
    }
    let targets = DMatrix::from_fn(rows.len(), fast_dims.len(), |i, a| snapshot.points[(rows[i], fast_dims[a])]);
    let names = dict.term_names(&(1..=slow_dims.len()).map(|i| format!("x{i}")).collect::<Vec<_>>());
    let problem = SparseProblem::new(&features, &targets, names)?;
    let sparsity = SparsityOptions::new(opts.threshold, opts.max_sweeps);
    let mut coeffs = DMatrix::zeros(p, fast_dims.len());
    let mut sse = 0.0;
    for a in 0..fast_dims.len() {
        let fit = problem.fit_column(a, &sparsity)?;
        for (j, c) in fit.coeffs.iter().enumerate() {
            coeffs[(j, a)] = *c;
        }
        sse += fit.mse;
    }
    Ok(ManifoldFit {
        slow_dims: slow_dims.to_vec(),
        fast_dims,
        dict,
        coeffs,
        residual_rms: (sse / targets.ncols() as f64).sqrt(),
        n_points: rows.len(),
        snapshot_time_index: snapshot.time_index,
        options: opts.clone(),
    })
}

/// Where the reduced drift comes from.
#[derive(Clone, Debug)]
pub enum DriftSource {
    Known(SlowFastSystem),
    Estimated(EstimatedSde),
}

/// `dx = f(x, ĥ(x)) dt + σ dW` on the slow coordinates.
#[derive(Clone, Debug)]
pub struct ReducedSystem {
    source: DriftSource,
    manifold: ManifoldFit,
    sigma: Vec<f64>,
}

pub fn build_reduced(source: DriftSource, manifold: ManifoldFit, sigma_slow: Vec<f64>) -> Result<ReducedSystem> {
    let n_slow = manifold.slow_dims.len();
    if sigma_slow.len() != n_slow {
        return Err(Error::dims(n_slow, sigma_slow.len(), "slow noise vector"));
    }
    if sigma_slow.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(Error::arg("slow noise intensities must be finite and nonnegative"));
    }
    match &source {
        DriftSource::Known(sys) => {
            if sys.dim() != manifold.state_dim() {
                return Err(Error::dims(sys.dim(), manifold.state_dim(), "system vs manifold state dimension"));
            }
            let expected: Vec<usize> = (0..sys.slow_dim()).collect();
            if manifold.slow_dims != expected {
                return Err(Error::arg("manifold slow dims must be the system's slow block"));
            }
        }
        DriftSource::Estimated(esde) => {
            if esde.state_dim() != manifold.state_dim() {
                return Err(Error::dims(esde.state_dim(), manifold.state_dim(), "estimated SDE vs manifold state dimension"));
            }
            if esde.identified_dims != manifold.slow_dims {
                return Err(Error::arg("estimated SDE must cover exactly the manifold's slow dims"));
            }
        }
    }
    Ok(ReducedSystem {
        source,
        manifold,
        sigma: sigma_slow,
    })
}

impl ReducedSystem {
    pub fn manifold(&self) -> &ManifoldFit {
        &self.manifold
    }

    pub fn source(&self) -> &DriftSource {
        &self.source
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn with_sigma(&self, sigma: Vec<f64>) -> Result<Self> {
        build_reduced(self.source.clone(), self.manifold.clone(), sigma)
    }
}

impl Dynamics for ReducedSystem {
    fn dim(&self) -> usize {
        self.manifold.slow_dims.len()
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        // dimensions were checked in build_reduced
        let z = self.manifold.lift(x).expect("manifold evaluation");
        match &self.source {
            DriftSource::Known(sys) => sys.slow_drift(&z, out),
            DriftSource::Estimated(esde) => {
                let mut theta = vec![0.0; esde.dict.len()];
                esde.drift_into(&z, &mut theta, out).expect("estimated drift evaluation");
            }
        }
    }

    fn noise_scale(&self) -> &[f64] {
        &self.sigma
    }
}

pub fn simulate_reduced(
    reduced: &ReducedSystem,
    x0: &[f64],
    dt: f64,
    n_steps: usize,
    stream: &mut Stream,
) -> Result<Trajectory> {
    simulate_trajectory(reduced, x0, dt, n_steps, stream)
}

/// Leading `d` left singular vectors of a `D × m` snapshot matrix, and all
/// singular values in decreasing order.
pub fn pod_basis(z: &DMatrix<f64>, d: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let k = z.nrows().min(z.ncols());
    if d == 0 || d > k {
        return Err(Error::OutOfRange { index: d, max: k });
    }
    let svd = z.clone().svd(true, false);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let phi = DMatrix::from_fn(z.nrows(), d, |r, c| u[(r, order[c])]);
    let values = order.iter().map(|&i| svd.singular_values[i]).collect();
    Ok((phi, values))
}
