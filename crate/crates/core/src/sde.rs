//! Slow-fast stochastic systems and their Euler–Maruyama simulation.
//!
//! A system has the form
//!
//! ```text
//! dx = f(x, y) dt + σ₁ ⊙ dW¹
//! dy = (1/ε) g(x, y) dt + (σ₂/√ε) ⊙ dW²
//! ```
//!
//! with constant diagonal diffusion. Anything that can provide an effective
//! drift and a per-coordinate noise scale implements [`Dynamics`] and can be
//! integrated by the same scheme; the reduced slow system uses this path.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Any |state entry| beyond this aborts the trajectory.
pub const BLOWUP_LIMIT: f64 = 1e12;

/// A vector-valued function of the split state `(x, y)`.
pub trait VectorField: Send + Sync {
    fn output_dim(&self) -> usize;
    fn eval(&self, x: &[f64], y: &[f64], out: &mut [f64]);
}

/// One monomial `coef · Π z_j^{powers_j}` over the full state `z = (x, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyTerm {
    pub coef: f64,
    pub powers: Vec<u32>,
}

/// Polynomial vector field, one sum of monomials per output coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolynomialField {
    pub input_dim: usize,
    pub outputs: Vec<Vec<PolyTerm>>,
}

impl PolynomialField {
    pub fn new(input_dim: usize, outputs: Vec<Vec<PolyTerm>>) -> Result<Self> {
        for (k, out) in outputs.iter().enumerate() {
            for term in out {
                if term.powers.len() != input_dim {
                    return Err(Error::dims(
                        input_dim,
                        term.powers.len(),
                        format!("powers of a term in output {k}"),
                    ));
                }
            }
        }
        Ok(Self { input_dim, outputs })
    }

    /// Builds a field from `(coef, powers)` tuples, one list per output.
    pub fn from_terms(input_dim: usize, outputs: &[&[(f64, &[u32])]]) -> Result<Self> {
        let outputs = outputs
            .iter()
            .map(|terms| {
                terms
                    .iter()
                    .map(|(coef, powers)| PolyTerm {
                        coef: *coef,
                        powers: powers.to_vec(),
                    })
                    .collect()
            })
            .collect();
        Self::new(input_dim, outputs)
    }

    pub fn zero(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            outputs: vec![Vec::new(); output_dim],
        }
    }

    pub fn eval_full(&self, z: &[f64], out: &mut [f64]) {
        for (o, terms) in out.iter_mut().zip(&self.outputs) {
            *o = terms
                .iter()
                .map(|t| {
                    t.powers
                        .iter()
                        .zip(z)
                        .fold(t.coef, |acc, (&p, &v)| if p == 0 { acc } else { acc * v.powi(p as i32) })
                })
                .sum();
        }
    }
}

impl VectorField for PolynomialField {
    fn output_dim(&self) -> usize {
        self.outputs.len()
    }

    fn eval(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let mut z = Vec::with_capacity(x.len() + y.len());
        z.extend_from_slice(x);
        z.extend_from_slice(y);
        self.eval_full(&z, out);
    }
}

type FieldFn = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;

/// Closure-backed vector field with a declared output dimension.
#[derive(Clone)]
pub struct FnField {
    output_dim: usize,
    f: Arc<FieldFn>,
}

impl FnField {
    pub fn new(
        output_dim: usize,
        f: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            output_dim,
            f: Arc::new(f),
        }
    }
}

impl VectorField for FnField {
    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn eval(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.f)(x, y, out)
    }
}

/// Effective dynamics `dz = drift(z) dt + scale ⊙ dW` integrated by
/// [`euler_maruyama_step`].
pub trait Dynamics: Sync {
    fn dim(&self) -> usize;
    fn drift(&self, z: &[f64], out: &mut [f64]);
    fn noise_scale(&self) -> &[f64];
}

/// Slow-fast system with additive diagonal noise.
#[derive(Clone)]
pub struct SlowFastSystem {
    slow_dim: usize,
    fast_dim: usize,
    epsilon: f64,
    drift_slow: Arc<dyn VectorField>,
    drift_fast: Arc<dyn VectorField>,
    sigma_slow: Vec<f64>,
    sigma_fast: Vec<f64>,
    scale: Vec<f64>,
}

impl std::fmt::Debug for SlowFastSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SlowFastSystem")
            .field("slow_dim", &self.slow_dim)
            .field("fast_dim", &self.fast_dim)
            .field("epsilon", &self.epsilon)
            .field("sigma_slow", &self.sigma_slow)
            .field("sigma_fast", &self.sigma_fast)
            .finish_non_exhaustive()
    }
}

impl SlowFastSystem {
    /// `drift_fast` is the `g` of the system, without the `1/ε` factor.
    pub fn new(
        epsilon: f64,
        drift_slow: Arc<dyn VectorField>,
        drift_fast: Arc<dyn VectorField>,
        sigma_slow: Vec<f64>,
        sigma_fast: Vec<f64>,
    ) -> Result<Self> {
        let slow_dim = sigma_slow.len();
        let fast_dim = sigma_fast.len();
        if slow_dim == 0 || fast_dim == 0 {
            return Err(Error::arg("slow and fast dimensions must both be at least 1"));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::arg(format!("epsilon must be positive, got {epsilon}")));
        }
        if let Some(s) = sigma_slow.iter().chain(&sigma_fast).find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(Error::arg(format!("noise intensities must be finite and nonnegative, got {s}")));
        }
        if drift_slow.output_dim() != slow_dim {
            return Err(Error::dims(slow_dim, drift_slow.output_dim(), "slow drift output"));
        }
        if drift_fast.output_dim() != fast_dim {
            return Err(Error::dims(fast_dim, drift_fast.output_dim(), "fast drift output"));
        }
        // probe at the origin
        let (x, y) = (vec![0.0; slow_dim], vec![0.0; fast_dim]);
        let mut fo = vec![0.0; slow_dim];
        let mut go = vec![0.0; fast_dim];
        drift_slow.eval(&x, &y, &mut fo);
        drift_fast.eval(&x, &y, &mut go);
        if fo.iter().chain(&go).any(|v| !v.is_finite()) {
            return Err(Error::arg("drift is not finite at the origin"));
        }
        let root_eps = epsilon.sqrt();
        let scale = sigma_slow
            .iter()
            .copied()
            .chain(sigma_fast.iter().map(|s| s / root_eps))
            .collect();
        Ok(Self {
            slow_dim,
            fast_dim,
            epsilon,
            drift_slow,
            drift_fast,
            sigma_slow,
            sigma_fast,
            scale,
        })
    }

    /// `dx = (x − xy)dt + σ₁dW¹`, `dy = −(1/ε)(y − x²/4)dt + (σ₂/√ε)dW²`.
    pub fn example1(sigma1: f64, sigma2: f64, epsilon: f64) -> Self {
        let f = PolynomialField::from_terms(2, &[&[(1.0, &[1, 0]), (-1.0, &[1, 1])]]).unwrap();
        let g = PolynomialField::from_terms(2, &[&[(-1.0, &[0, 1]), (0.25, &[2, 0])]]).unwrap();
        Self::new(epsilon, Arc::new(f), Arc::new(g), vec![sigma1], vec![sigma2]).unwrap()
    }

    /// Three-dimensional system with slow `(x₁, x₂)` and fast `y`.
    pub fn example2(sigma1: f64, sigma2: f64, sigma3: f64, epsilon: f64) -> Self {
        let f = PolynomialField::from_terms(
            3,
            &[
                &[(1.0, &[1, 0, 0]), (1.0, &[0, 0, 1]), (-0.5, &[1, 1, 0])],
                &[(1.0, &[0, 1, 0]), (1.0, &[0, 0, 2]), (-1.0, &[2, 0, 0])],
            ],
        )
        .unwrap();
        let g = PolynomialField::from_terms(3, &[&[(-1.0, &[0, 0, 1]), (-0.125, &[1, 1, 0])]]).unwrap();
        Self::new(epsilon, Arc::new(f), Arc::new(g), vec![sigma1, sigma2], vec![sigma3]).unwrap()
    }

    pub fn slow_dim(&self) -> usize {
        self.slow_dim
    }

    pub fn fast_dim(&self) -> usize {
        self.fast_dim
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn sigma_slow(&self) -> &[f64] {
        &self.sigma_slow
    }

    pub fn sigma_fast(&self) -> &[f64] {
        &self.sigma_fast
    }

    pub fn drift_slow(&self) -> &Arc<dyn VectorField> {
        &self.drift_slow
    }

    pub fn drift_fast(&self) -> &Arc<dyn VectorField> {
        &self.drift_fast
    }

    /// Same system with a different slow noise intensity.
    pub fn with_sigma_slow(&self, sigma_slow: Vec<f64>) -> Result<Self> {
        Self::new(
            self.epsilon,
            self.drift_slow.clone(),
            self.drift_fast.clone(),
            sigma_slow,
            self.sigma_fast.clone(),
        )
    }

    pub fn with_sigma_fast(&self, sigma_fast: Vec<f64>) -> Result<Self> {
        Self::new(
            self.epsilon,
            self.drift_slow.clone(),
            self.drift_fast.clone(),
            self.sigma_slow.clone(),
            sigma_fast,
        )
    }

    /// `f(x, y)` evaluated on the full state.
    pub fn slow_drift(&self, z: &[f64], out: &mut [f64]) {
        let (x, y) = z.split_at(self.slow_dim);
        self.drift_slow.eval(x, y, out);
    }

    /// `g(x, y)` evaluated on the full state, without the `1/ε` factor.
    pub fn fast_drift(&self, z: &[f64], out: &mut [f64]) {
        let (x, y) = z.split_at(self.slow_dim);
        self.drift_fast.eval(x, y, out);
    }
}

impl Dynamics for SlowFastSystem {
    fn dim(&self) -> usize {
        self.slow_dim + self.fast_dim
    }

    fn drift(&self, z: &[f64], out: &mut [f64]) {
        let (x, y) = z.split_at(self.slow_dim);
        let (fo, go) = out.split_at_mut(self.slow_dim);
        self.drift_slow.eval(x, y, fo);
        self.drift_fast.eval(x, y, go);
        let inv = 1.0 / self.epsilon;
        go.iter_mut().for_each(|v| *v *= inv);
    }

    fn noise_scale(&self) -> &[f64] {
        &self.scale
    }
}

/// One Euler–Maruyama step `z + drift(z)·dt + scale ⊙ √dt·noise`.
pub fn euler_maruyama_step<S: Dynamics + ?Sized>(
    system: &S,
    z: &[f64],
    dt: f64,
    noise: &[f64],
) -> Result<Vec<f64>> {
    let n = system.dim();
    if z.len() != n {
        return Err(Error::dims(n, z.len(), "state"));
    }
    if noise.len() != n {
        return Err(Error::dims(n, noise.len(), "noise"));
    }
    if !(dt > 0.0) {
        return Err(Error::arg(format!("dt must be positive, got {dt}")));
    }
    let mut drift = vec![0.0; n];
    let mut out = vec![0.0; n];
    step_into(system, z, dt, dt.sqrt(), noise, &mut drift, &mut out, 0)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn step_into<S: Dynamics + ?Sized>(
    system: &S,
    z: &[f64],
    dt: f64,
    sqrt_dt: f64,
    noise: &[f64],
    drift: &mut [f64],
    out: &mut [f64],
    step: usize,
) -> Result<()> {
    system.drift(z, drift);
    if drift.iter().any(|d| !d.is_finite()) {
        return Err(Error::IntegrationBlowup {
            step,
            trajectory: None,
            state: z.to_vec(),
        });
    }
    let scale = system.noise_scale();
    for i in 0..z.len() {
        out[i] = z[i] + drift[i] * dt + scale[i] * sqrt_dt * noise[i];
    }
    if out.iter().any(|v| !(v.abs() <= BLOWUP_LIMIT)) {
        return Err(Error::IntegrationBlowup {
            step,
            trajectory: None,
            state: z.to_vec(),
        });
    }
    Ok(())
}

/// Sampled path on a uniform time grid; row `k` is the state at `t0 + k·dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    pub states: DMatrix<f64>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.states.nrows() - 1
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn row(&self, k: usize) -> Vec<f64> {
        self.states.row(k).iter().copied().collect()
    }
}

/// Simulates `n_steps` Euler–Maruyama steps from `z0`, drawing fresh
/// standard-normal noise from `stream` at every step.
pub fn simulate_trajectory<S: Dynamics + ?Sized>(
    system: &S,
    z0: &[f64],
    dt: f64,
    n_steps: usize,
    stream: &mut Stream,
) -> Result<Trajectory> {
    let n = system.dim();
    if z0.len() != n {
        return Err(Error::dims(n, z0.len(), "initial state"));
    }
    if n_steps == 0 {
        return Err(Error::arg("n_steps must be at least 1"));
    }
    if !(dt > 0.0) {
        return Err(Error::arg(format!("dt must be positive, got {dt}")));
    }
    if z0.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("initial state must be finite"));
    }
    let sqrt_dt = dt.sqrt();
    let mut data = Vec::with_capacity((n_steps + 1) * n);
    data.extend_from_slice(z0);
    let mut z = z0.to_vec();
    let mut next = vec![0.0; n];
    let mut drift = vec![0.0; n];
    let mut noise = vec![0.0; n];
    for k in 0..n_steps {
        stream.fill_normal(&mut noise);
        step_into(system, &z, dt, sqrt_dt, &noise, &mut drift, &mut next, k)?;
        std::mem::swap(&mut z, &mut next);
        data.extend_from_slice(&z);
    }
    Ok(Trajectory {
        t0: 0.0,
        dt,
        states: DMatrix::from_row_slice(n_steps + 1, n, &data),
    })
}

/// Per-coordinate initial-condition law: uniform on `[lo, hi]`, or the fixed
/// point `lo` when `lo == hi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitRange {
    pub lo: f64,
    pub hi: f64,
}

impl InitRange {
    pub fn uniform(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSampler(pub Vec<InitRange>);

impl InitSampler {
    pub fn fixed_point(z: &[f64]) -> Self {
        Self(z.iter().map(|&v| InitRange::fixed(v)).collect())
    }

    pub fn sample(&self, stream: &mut Stream) -> Vec<f64> {
        self.0
            .iter()
            .map(|r| if r.lo == r.hi { r.lo } else { stream.uniform_range(r.lo, r.hi) })
            .collect()
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.0.len() != dim {
            return Err(Error::dims(dim, self.0.len(), "initial-condition ranges"));
        }
        if let Some(r) = self.0.iter().find(|r| !(r.lo <= r.hi) || !r.lo.is_finite() || !r.hi.is_finite()) {
            return Err(Error::arg(format!("invalid initial range [{}, {}]", r.lo, r.hi)));
        }
        Ok(())
    }
}

/// Shape-identical trajectories plus the seed that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    trajectories: Vec<Trajectory>,
    pub seed: u64,
}

impl Ensemble {
    pub fn new(trajectories: Vec<Trajectory>, seed: u64) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::Empty("ensemble has no trajectories".into()))?;
        let shape = first.states.shape();
        for (i, t) in trajectories.iter().enumerate() {
            if t.states.shape() != shape || t.dt != first.dt || t.t0 != first.t0 {
                return Err(Error::arg(format!(
                    "trajectory {i} has shape {:?}/dt {}/t0 {}, expected {:?}/{}/{}",
                    t.states.shape(),
                    t.dt,
                    t.t0,
                    shape,
                    first.dt,
                    first.t0
                )));
            }
            if t.states.iter().any(|v| !v.is_finite()) {
                return Err(Error::arg(format!("trajectory {i} has non-finite entries")));
            }
        }
        Ok(Self { trajectories, seed })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn n_steps(&self) -> usize {
        self.trajectories[0].n_steps()
    }

    pub fn dim(&self) -> usize {
        self.trajectories[0].dim()
    }

    pub fn dt(&self) -> f64 {
        self.trajectories[0].dt
    }

    pub fn t0(&self) -> f64 {
        self.trajectories[0].t0
    }
}

/// Simulates `n_traj` independent paths. Trajectory `i` draws its initial
/// condition and then its noise from sub-stream `(seed, i)`.
pub fn simulate_ensemble<S: Dynamics + ?Sized>(
    system: &S,
    init: &InitSampler,
    n_traj: usize,
    dt: f64,
    n_steps: usize,
    seed: u64,
) -> Result<Ensemble> {
    if n_traj == 0 {
        return Err(Error::arg("n_traj must be at least 1"));
    }
    init.validate(system.dim())?;
    let trajectories = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let mut stream = Stream::substream(seed, i as u64);
            let z0 = init.sample(&mut stream);
            simulate_trajectory(system, &z0, dt, n_steps, &mut stream).map_err(|e| match e {
                Error::IntegrationBlowup { step, state, .. } => Error::IntegrationBlowup {
                    step,
                    trajectory: Some(i),
                    state,
                },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(trajectories, seed)
}

/// Keeps the first `n_steps + 1` rows of each trajectory.
pub fn truncate(ensemble: &Ensemble, n_steps: usize) -> Result<Ensemble> {
    if n_steps == 0 || n_steps > ensemble.n_steps() {
        return Err(Error::OutOfRange {
            index: n_steps,
            max: ensemble.n_steps(),
        });
    }
    let trajectories = ensemble
        .trajectories
        .iter()
        .map(|t| Trajectory {
            t0: t.t0,
            dt: t.dt,
            states: t.states.rows(0, n_steps + 1).into_owned(),
        })
        .collect();
    Ensemble::new(trajectories, ensemble.seed)
}

/// Keeps every `stride`-th row of each trajectory.
pub fn coarse_grain(ensemble: &Ensemble, stride: usize) -> Result<Ensemble> {
    let n_steps = ensemble.n_steps();
    if stride == 0 || n_steps % stride != 0 {
        return Err(Error::arg(format!(
            "stride {stride} does not divide the {n_steps} steps of the ensemble"
        )));
    }
    let rows = n_steps / stride + 1;
    let trajectories = ensemble
        .trajectories
        .iter()
        .map(|t| Trajectory {
            t0: t.t0,
            dt: t.dt * stride as f64,
            states: DMatrix::from_fn(rows, t.dim(), |r, c| t.states[(r * stride, c)]),
        })
        .collect();
    Ensemble::new(trajectories, ensemble.seed)
}

/// Point cloud of all ensemble members at one time index.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub time_index: usize,
    pub points: DMatrix<f64>,
}

impl Snapshot {
    pub fn new(time_index: usize, points: DMatrix<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::Empty("snapshot has no points".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("snapshot has non-finite entries"));
        }
        Ok(Self { time_index, points })
    }

    pub fn n_samples(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.points.column(c).iter().copied().collect()
    }
}

pub fn snapshot_at(ensemble: &Ensemble, time_index: usize) -> Result<Snapshot> {
    let n_steps = ensemble.n_steps();
    if time_index > n_steps {
        return Err(Error::OutOfRange {
            index: time_index,
            max: n_steps,
        });
    }
    let trajs = ensemble.trajectories();
    let points = DMatrix::from_fn(trajs.len(), ensemble.dim(), |r, c| trajs[r].states[(time_index, c)]);
    Snapshot::new(time_index, points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn zero_system() -> SlowFastSystem {
        SlowFastSystem::new(
            0.5,
            Arc::new(PolynomialField::zero(2, 1)),
            Arc::new(PolynomialField::zero(2, 1)),
            vec![0.0],
            vec![0.0],
        )
        .unwrap()
    }

    /// Slow-only OU `dx = −x dt + σ dW`, with an inert fast coordinate.
    pub(crate) fn ou(sigma: f64) -> SlowFastSystem {
        SlowFastSystem::new(
            1.0,
            Arc::new(FnField::new(1, |x, _, out| out[0] = -x[0])),
            Arc::new(PolynomialField::zero(2, 1)),
            vec![sigma],
            vec![0.0],
        )
        .unwrap()
    }

    #[test]
    fn zero_dynamics_step_is_identity() {
        let z = euler_maruyama_step(&zero_system(), &[1.5, -2.0], 0.1, &[0.7, 0.3]).unwrap();
        assert_eq!(z, vec![1.5, -2.0]);
    }

    #[test]
    fn forward_euler_arithmetic() {
        let z = euler_maruyama_step(&ou(0.0), &[1.0, 0.0], 0.1, &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(z[0], 0.9, epsilon = 1e-15);
    }

    #[test]
    fn example1_step_matches_hand_evaluation() {
        // x' = 2 + 0·0.001 + √0.001·0.5, y' = 1 + 0 + (0.1/√0.01)·√0.001·(−0.3)
        let sys = SlowFastSystem::example1(1.0, 0.1, 0.01);
        let z = euler_maruyama_step(&sys, &[2.0, 1.0], 0.001, &[0.5, -0.3]).unwrap();
        assert_abs_diff_eq!(z[0], 2.015_811_388_300_842, epsilon = 1e-12);
        assert_abs_diff_eq!(z[1], 0.990_513_167_019_495, epsilon = 1e-12);
    }

    #[test]
    fn blowup_is_reported() {
        let sys = SlowFastSystem::new(
            1.0,
            Arc::new(FnField::new(1, |x, _, out| out[0] = x[0] * x[0])),
            Arc::new(PolynomialField::zero(2, 1)),
            vec![0.0],
            vec![0.0],
        )
        .unwrap();
        let err = simulate_trajectory(&sys, &[10.0, 0.0], 0.5, 100, &mut Stream::new(0, 0)).unwrap_err();
        assert!(matches!(err, Error::IntegrationBlowup { .. }), "{err}");
    }

    #[test]
    fn construction_checks() {
        let bad = SlowFastSystem::new(
            0.0,
            Arc::new(PolynomialField::zero(2, 1)),
            Arc::new(PolynomialField::zero(2, 1)),
            vec![1.0],
            vec![1.0],
        );
        assert!(bad.is_err());
        let wrong_dim = SlowFastSystem::new(
            0.1,
            Arc::new(PolynomialField::zero(2, 2)),
            Arc::new(PolynomialField::zero(2, 1)),
            vec![1.0],
            vec![1.0],
        );
        assert!(matches!(wrong_dim, Err(Error::DimensionMismatch { .. })));
        let neg = SlowFastSystem::example1(1.0, 0.1, 0.01).with_sigma_slow(vec![-1.0]);
        assert!(neg.is_err());
    }

    #[test]
    fn trajectory_shapes_and_zero_dynamics() {
        assert!(simulate_trajectory(&zero_system(), &[1.0, 2.0], 0.1, 0, &mut Stream::new(0, 0)).is_err());
        let t = simulate_trajectory(&zero_system(), &[1.0, 2.0], 0.1, 1, &mut Stream::new(0, 0)).unwrap();
        assert_eq!(t.states.nrows(), 2);
        let t = simulate_trajectory(&zero_system(), &[1.0, 2.0], 0.1, 25, &mut Stream::new(0, 0)).unwrap();
        for k in 0..=25 {
            assert_eq!(t.row(k), vec![1.0, 2.0]);
        }
    }

    #[test]
    fn deterministic_ou_tracks_exponential() {
        let t = simulate_trajectory(&ou(0.0), &[1.0, 0.0], 1e-3, 1000, &mut Stream::new(0, 0)).unwrap();
        assert!((t.states[(1000, 0)] - (-1.0f64).exp()).abs() < 0.01);
    }

    #[test]
    fn singleton_ensemble_equals_trajectory() {
        let sys = SlowFastSystem::example1(1.0, 0.1, 0.01);
        let init = InitSampler::fixed_point(&[1.0, 0.5]);
        let e = simulate_ensemble(&sys, &init, 1, 1e-3, 20, 9).unwrap();
        let t = simulate_trajectory(&sys, &[1.0, 0.5], 1e-3, 20, &mut Stream::substream(9, 0)).unwrap();
        assert_eq!(e.trajectories()[0], t);
    }

    #[test]
    fn ensemble_is_deterministic() {
        let sys = SlowFastSystem::example1(1.0, 0.1, 0.01);
        let init = InitSampler(vec![InitRange::uniform(-5.0, 5.0), InitRange::uniform(-6.0, 6.0)]);
        let a = simulate_ensemble(&sys, &init, 50, 1e-3, 10, 3).unwrap();
        let b = simulate_ensemble(&sys, &init, 50, 1e-3, 10, 3).unwrap();
        assert_eq!(a, b);
        let c = simulate_ensemble(&sys, &init, 50, 1e-3, 10, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn coarse_grain_rules() {
        let sys = SlowFastSystem::example1(1.0, 0.1, 0.01);
        let init = InitSampler(vec![InitRange::uniform(-1.0, 1.0), InitRange::uniform(-1.0, 1.0)]);
        let e = simulate_ensemble(&sys, &init, 3, 0.01, 200, 1).unwrap();
        assert_eq!(coarse_grain(&e, 1).unwrap(), e);
        let c = coarse_grain(&e, 20).unwrap();
        assert_eq!(c.n_steps(), 10);
        assert_abs_diff_eq!(c.dt(), 0.2, epsilon = 1e-15);
        assert!(matches!(coarse_grain(&e, 7), Err(Error::InvalidArgument(_))));
        for k in 0..=10 {
            assert_eq!(snapshot_at(&c, k).unwrap().points, snapshot_at(&e, 20 * k).unwrap().points);
        }
    }

    #[test]
    fn snapshot_rules() {
        let sys = SlowFastSystem::example1(1.0, 0.1, 0.01);
        let init = InitSampler(vec![InitRange::uniform(-5.0, 5.0), InitRange::uniform(-6.0, 6.0)]);
        let e = simulate_ensemble(&sys, &init, 4, 1e-3, 10, 2).unwrap();
        let s0 = snapshot_at(&e, 0).unwrap();
        for (i, t) in e.trajectories().iter().enumerate() {
            assert_eq!(s0.points.row(i), t.states.row(0));
        }
        assert_eq!(snapshot_at(&e, 10).unwrap().points.shape(), (4, 2));
        assert!(matches!(snapshot_at(&e, 11), Err(Error::OutOfRange { .. })));
    }
}
