//! Recursive train-and-predict loop over windowed ensembles.
//!
//! A window is the `m × D` path of one ensemble member. The model maps it to
//! the same path shifted forward by `l − 1` steps: its first `m − l + 1`
//! output rows must reproduce observed rows `l..m`, and its last `l − 1` rows
//! must match a drift-only Euler extension of the window by the identified
//! SDE. Each generation trains on the current windows and then replaces every
//! window by the model's output, pushing the ensemble forward in time until
//! its last-row distribution stops moving.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::km::EstimatedSde;
use crate::neural::{loss_and_grad, AdamState, AutoSdeModel, LossParts};
use crate::rng::Stream;
use crate::sde::{Dynamics, Ensemble, SlowFastSystem, Snapshot, BLOWUP_LIMIT};

/// `n` windows of `m × D`, stored row-major and contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowDataset {
    data: Vec<f64>,
    n: usize,
    m: usize,
    d: usize,
    pub dt: f64,
    pub generation: usize,
    /// Time index (on the window grid) of every window's last row.
    pub last_time_index: usize,
}

impl WindowDataset {
    pub fn from_windows(windows: &[DMatrix<f64>], dt: f64) -> Result<Self> {
        let first = windows.first().ok_or_else(|| Error::Empty("no windows".into()))?;
        let (m, d) = first.shape();
        let mut data = Vec::with_capacity(windows.len() * m * d);
        for w in windows {
            if w.shape() != (m, d) {
                return Err(Error::dims(m * d, w.nrows() * w.ncols(), "window shape"));
            }
            for r in 0..m {
                data.extend(w.row(r).iter().copied());
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("windows contain non-finite entries"));
        }
        Ok(Self {
            data,
            n: windows.len(),
            m,
            d,
            dt,
            generation: 0,
            last_time_index: m - 1,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn window(&self, i: usize) -> &[f64] {
        let s = self.m * self.d;
        &self.data[i * s..(i + 1) * s]
    }

    pub fn window_matrix(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.m, self.d, self.window(i))
    }

    /// Row `r` of every window as a point cloud.
    pub fn snapshot(&self, r: usize) -> Result<Snapshot> {
        if r >= self.m {
            return Err(Error::OutOfRange { index: r, max: self.m - 1 });
        }
        let points = DMatrix::from_fn(self.n, self.d, |i, c| self.data[(i * self.m + r) * self.d + c]);
        Snapshot::new(self.last_time_index + 1 + r - self.m, points)
    }

    pub fn last_snapshot(&self) -> Result<Snapshot> {
        self.snapshot(self.m - 1)
    }

    /// Per-coordinate mean and standard deviation over all window entries.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let count = (self.n * self.m) as f64;
        let mut mean = vec![0.0; self.d];
        for row in self.data.chunks(self.d) {
            for (a, v) in mean.iter_mut().zip(row) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|a| *a /= count);
        let mut var = vec![0.0; self.d];
        for row in self.data.chunks(self.d) {
            for c in 0..self.d {
                let e = row[c] - mean[c];
                var[c] += e * e;
            }
        }
        let std = var.into_iter().map(|v| (v / count).sqrt()).collect();
        (mean, std)
    }
}

/// One window per trajectory, generation 0.
pub fn make_windows(ensemble: &Ensemble) -> Result<WindowDataset> {
    let windows: Vec<DMatrix<f64>> = ensemble.trajectories().iter().map(|t| t.states.clone()).collect();
    WindowDataset::from_windows(&windows, ensemble.dt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub m: usize,
    pub l: usize,
    /// Minibatch ADAM steps per generation.
    pub epochs: usize,
    /// Steps for the first generation; defaults to `epochs`.
    #[serde(default)]
    pub initial_epochs: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub tau_dist: f64,
    pub max_generations: usize,
    /// Generations run before the distance test may stop the loop.
    #[serde(default = "one")]
    pub min_generations: usize,
    pub seed: u64,
    /// Euler substeps per window step in the SDE extension.
    #[serde(default = "one")]
    pub substeps: usize,
    /// Windows with any entry beyond this magnitude are dropped after
    /// prediction.
    #[serde(default)]
    pub escape_radius: Option<f64>,
    /// Snapshots are thinned to at most this many points before the
    /// distance test.
    #[serde(default)]
    pub dist_max_points: Option<usize>,
}

fn one() -> usize {
    1
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l > 1 && self.l <= self.m) {
            return Err(Error::arg(format!("l = {} must satisfy 1 < l ≤ m = {}", self.l, self.m)));
        }
        if self.batch_size == 0 || self.max_generations == 0 || self.substeps == 0 {
            return Err(Error::arg("batch_size, max_generations and substeps must be at least 1"));
        }
        if self.min_generations > self.max_generations {
            return Err(Error::arg("min_generations exceeds max_generations"));
        }
        if !(self.tau_dist > 0.0) || !(self.lr > 0.0) {
            return Err(Error::arg("tau_dist and lr must be positive"));
        }
        if self.escape_radius.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::arg("escape_radius must be positive"));
        }
        Ok(())
    }
}

/// Drift of the extension: the identified SDE on its dims, the known system
/// drift (including `1/ε` on fast dims) elsewhere.
struct ExtensionDrift<'a> {
    esde: &'a EstimatedSde,
    system: &'a SlowFastSystem,
}

impl ExtensionDrift<'_> {
    fn eval(&self, z: &[f64], theta: &mut [f64], est: &mut [f64], out: &mut [f64]) -> Result<()> {
        self.system.drift(z, out);
        self.esde.drift_into(z, theta, est)?;
        for (a, &d) in self.esde.identified_dims.iter().enumerate() {
            out[d] = est[a];
        }
        Ok(())
    }
}

/// The `l − 1` rows that follow a window under drift-only Euler steps of
/// `dt / substeps`, starting from the window's last row.
pub fn sde_extension(
    esde: &EstimatedSde,
    system: &SlowFastSystem,
    window: &[f64],
    m: usize,
    l: usize,
    dt: f64,
    substeps: usize,
) -> Result<Vec<f64>> {
    let d = system.dim();
    if esde.state_dim() != d {
        return Err(Error::dims(d, esde.state_dim(), "estimated SDE state dimension"));
    }
    if window.len() != m * d || m == 0 {
        return Err(Error::dims(m * d, window.len(), "window entries"));
    }
    if l < 2 || substeps == 0 || !(dt > 0.0) {
        return Err(Error::arg("extension needs l ≥ 2, substeps ≥ 1 and dt > 0"));
    }
    let field = ExtensionDrift { esde, system };
    let h = dt / substeps as f64;
    let mut z = window[(m - 1) * d..].to_vec();
    let mut drift = vec![0.0; d];
    let mut theta = vec![0.0; esde.dict.len()];
    let mut est = vec![0.0; esde.identified_dims.len()];
    let mut out = Vec::with_capacity((l - 1) * d);
    for step in 0..(l - 1) * substeps {
        field.eval(&z, &mut theta, &mut est, &mut drift)?;
        for (zi, fi) in z.iter_mut().zip(&drift) {
            *zi += h * fi;
        }
        if z.iter().any(|v| !(v.abs() <= BLOWUP_LIMIT)) {
            return Err(Error::IntegrationBlowup {
                step,
                trajectory: None,
                state: z,
            });
        }
        if (step + 1) % substeps == 0 {
            out.extend_from_slice(&z);
        }
    }
    Ok(out)
}

/// Loss targets for every window of a dataset.
#[derive(Clone, Debug)]
pub struct Targets {
    overlap: Vec<f64>,
    extension: Vec<f64>,
    n_ae: usize,
    n_sde: usize,
    d: usize,
}

impl Targets {
    pub fn overlap(&self, i: usize) -> &[f64] {
        let s = self.n_ae * self.d;
        &self.overlap[i * s..(i + 1) * s]
    }

    pub fn extension(&self, i: usize) -> &[f64] {
        let s = self.n_sde * self.d;
        &self.extension[i * s..(i + 1) * s]
    }
}

/// Observed rows `l..m` and the SDE extension of each window.
pub fn build_targets(
    dataset: &WindowDataset,
    esde: &EstimatedSde,
    system: &SlowFastSystem,
    l: usize,
    substeps: usize,
) -> Result<Targets> {
    let (m, d) = (dataset.m, dataset.d);
    if !(l > 1 && l <= m) {
        return Err(Error::arg(format!("l = {l} must satisfy 1 < l ≤ m = {m}")));
    }
    let ext: Vec<Vec<f64>> = (0..dataset.n)
        .into_par_iter()
        .map(|i| sde_extension(esde, system, dataset.window(i), m, l, dataset.dt, substeps))
        .collect::<Result<_>>()?;
    let mut overlap = Vec::with_capacity(dataset.n * (m - l + 1) * d);
    for i in 0..dataset.n {
        overlap.extend_from_slice(&dataset.window(i)[(l - 1) * d..]);
    }
    Ok(Targets {
        overlap,
        extension: ext.concat(),
        n_ae: m - l + 1,
        n_sde: l - 1,
        d,
    })
}

/// Runs `epochs` minibatch ADAM steps. Each step draws `batch_size` windows
/// uniformly with replacement and averages their losses and gradients.
/// Returns the batch loss before each step.
#[allow(clippy::too_many_arguments)]
pub fn train_generation(
    model: &mut AutoSdeModel,
    adam: &mut AdamState,
    dataset: &WindowDataset,
    targets: &Targets,
    l: usize,
    epochs: usize,
    batch_size: usize,
    stream: &mut Stream,
) -> Result<Vec<LossParts>> {
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::arg("batch_size must be at least 1"));
    }
    let m = dataset.m;
    let mut trace = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let batch: Vec<usize> = (0..batch_size).map(|_| stream.index(dataset.n)).collect();
        let results: Vec<(LossParts, Vec<f64>)> = batch
            .par_iter()
            .map(|&i| loss_and_grad(model, dataset.window(i), targets.overlap(i), targets.extension(i), m, l))
            .collect::<Result<_>>()?;
        // sequential reduction keeps the sum order fixed
        let w = 1.0 / batch_size as f64;
        let mut grad = vec![0.0; model.n_params()];
        let mut parts = LossParts::default();
        for (p, g) in &results {
            parts.ae += w * p.ae;
            parts.sde += w * p.sde;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += w * b;
            }
        }
        if !parts.total().is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NumericalOverflow("training loss".into()));
        }
        adam.step(&mut model.params, &grad)?;
        trace.push(parts);
    }
    Ok(trace)
}

/// Replaces every window by the model's output, advancing the window's time
/// stamps by `l − 1`. Windows whose output leaves the escape radius are
/// dropped; the count of dropped windows is returned alongside.
pub fn recursive_predict(
    model: &AutoSdeModel,
    dataset: &WindowDataset,
    l: usize,
    escape_radius: Option<f64>,
) -> Result<(WindowDataset, usize)> {
    let (m, d) = (dataset.m, dataset.d);
    if model.input_dim() != d {
        return Err(Error::dims(d, model.input_dim(), "model input dimension"));
    }
    let outputs: Vec<Vec<f64>> = (0..dataset.n)
        .into_par_iter()
        .map(|i| model.forward_rows(dataset.window(i), m).map(|(o, _)| o))
        .collect::<Result<_>>()?;
    let radius = escape_radius.unwrap_or(f64::INFINITY);
    let mut data = Vec::with_capacity(dataset.data.len());
    let mut kept = 0;
    for o in &outputs {
        if o.iter().all(|v| v.abs() <= radius) {
            data.extend_from_slice(o);
            kept += 1;
        }
    }
    if kept == 0 {
        return Err(Error::Empty("every window left the escape radius".into()));
    }
    Ok((
        WindowDataset {
            data,
            n: kept,
            m,
            d,
            dt: dataset.dt,
            generation: dataset.generation + 1,
            last_time_index: dataset.last_time_index + l - 1,
        },
        dataset.n - kept,
    ))
}

/// Sum of `|s_i − s_j|` over unordered pairs of an ascending slice.
fn pair_abs_sum_sorted(s: &[f64]) -> f64 {
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, v)| (2.0 * i as f64 - n + 1.0) * v)
        .sum()
}

fn sorted(v: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = v.collect();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

/// Energy distance `2E‖A−B‖ − E‖A−A′‖ − E‖B−B′‖` between two point
/// clouds, with all expectations taken as full (V-statistic) averages.
pub fn ensemble_distance(a: &Snapshot, b: &Snapshot) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dims(a.dim(), b.dim(), "snapshot columns"));
    }
    let (na, nb) = (a.n_samples() as f64, b.n_samples() as f64);
    if a.n_samples() == 0 || b.n_samples() == 0 {
        return Err(Error::Empty("snapshot".into()));
    }
    let d = if a.dim() == 1 {
        let sa = sorted(a.points.iter().copied());
        let sb = sorted(b.points.iter().copied());
        let sab = sorted(sa.iter().chain(&sb).copied());
        let (wa, wb) = (pair_abs_sum_sorted(&sa), pair_abs_sum_sorted(&sb));
        let cross = pair_abs_sum_sorted(&sab) - wa - wb;
        2.0 * cross / (na * nb) - 2.0 * wa / (na * na) - 2.0 * wb / (nb * nb)
    } else {
        let rows = |s: &Snapshot| -> Vec<Vec<f64>> { s.points.row_iter().map(|r| r.iter().copied().collect()).collect() };
        let (ra, rb) = (rows(a), rows(b));
        let mean_dist = |x: &[Vec<f64>], y: &[Vec<f64>]| -> f64 {
            let total: f64 = x
                .par_iter()
                .map(|p| {
                    y.iter()
                        .map(|q| p.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt())
                        .sum::<f64>()
                })
                .collect::<Vec<f64>>()
                .iter()
                .sum();
            total / (x.len() * y.len()) as f64
        };
        2.0 * mean_dist(&ra, &rb) - mean_dist(&ra, &ra) - mean_dist(&rb, &rb)
    };
    // rounding can leave a tiny negative value for near-identical clouds
    Ok(d.max(0.0))
}

/// Every `k`-th row so that at most `max_points` remain.
pub fn thin_snapshot(s: &Snapshot, max_points: usize) -> Result<Snapshot> {
    let n = s.n_samples();
    if max_points == 0 {
        return Err(Error::arg("max_points must be at least 1"));
    }
    if n <= max_points {
        return Ok(s.clone());
    }
    let stride = n.div_ceil(max_points);
    let idx: Vec<usize> = (0..n).step_by(stride).collect();
    Snapshot::new(s.time_index, DMatrix::from_fn(idx.len(), s.dim(), |r, c| s.points[(idx[r], c)]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceStatus {
    Converged,
    MaxGenerations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub time_index: usize,
    /// Energy distance to the previous generation's last-row snapshot.
    pub distance: f64,
    pub n_windows: usize,
    pub dropped: usize,
    pub final_loss: LossParts,
    pub loss_trace: Vec<LossParts>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub status: ConvergenceStatus,
    pub generations: usize,
    pub final_distance: f64,
    pub tau_dist: f64,
    pub records: Vec<GenerationRecord>,
}

pub struct Algorithm1Output {
    /// Last-row snapshot of the initial data, then of every generation.
    pub snapshots: Vec<Snapshot>,
    pub model: AutoSdeModel,
    pub dataset: WindowDataset,
    pub report: ConvergenceReport,
}

/// Alternates training and recursive prediction until consecutive
/// last-row snapshots are within `tau_dist` (after `min_generations`) or
/// `max_generations` is reached. The model is warm-started across
/// generations and the optimizer state carries over.
pub fn run_algorithm1(
    dataset: WindowDataset,
    esde: &EstimatedSde,
    system: &SlowFastSystem,
    mut model: AutoSdeModel,
    cfg: &TrainConfig,
) -> Result<Algorithm1Output> {
    cfg.validate()?;
    if dataset.m != cfg.m {
        return Err(Error::dims(cfg.m, dataset.m, "window length"));
    }
    let mut adam = AdamState::new(model.n_params(), cfg.lr);
    let mut stream = Stream::new(cfg.seed, 0xA1);
    let thin = |s: &Snapshot| match cfg.dist_max_points {
        Some(k) => thin_snapshot(s, k),
        None => Ok(s.clone()),
    };
    let mut snapshots = vec![dataset.last_snapshot()?];
    let mut records = Vec::new();
    let mut current = dataset;
    let mut status = ConvergenceStatus::MaxGenerations;
    for gen in 1..=cfg.max_generations {
        let targets = build_targets(&current, esde, system, cfg.l, cfg.substeps)?;
        let epochs = if gen == 1 { cfg.initial_epochs.unwrap_or(cfg.epochs) } else { cfg.epochs };
        let trace = train_generation(
            &mut model,
            &mut adam,
            &current,
            &targets,
            cfg.l,
            epochs,
            cfg.batch_size,
            &mut stream,
        )?;
        let (next, dropped) = recursive_predict(&model, &current, cfg.l, cfg.escape_radius)?;
        let snap = next.last_snapshot()?;
        let distance = ensemble_distance(&thin(snapshots.last().unwrap())?, &thin(&snap)?)?;
        records.push(GenerationRecord {
            generation: gen,
            time_index: next.last_time_index,
            distance,
            n_windows: next.len(),
            dropped,
            final_loss: trace.last().copied().unwrap_or_default(),
            loss_trace: trace,
        });
        snapshots.push(snap);
        current = next;
        if gen >= cfg.min_generations && distance < cfg.tau_dist {
            status = ConvergenceStatus::Converged;
            break;
        }
    }
    let report = ConvergenceReport {
        status,
        generations: records.len(),
        final_distance: records.last().map_or(f64::NAN, |r| r.distance),
        tau_dist: cfg.tau_dist,
        records,
    };
    Ok(Algorithm1Output {
        snapshots,
        model,
        dataset: current,
        report,
    })
}
