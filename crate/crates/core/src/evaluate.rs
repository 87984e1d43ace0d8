//! Reduced versus original slow dynamics: marginal distributions, path
//! tracking under shared noise, and dispersion across noise intensities.

use serde::{Deserialize, Serialize};

use crate::autosde::ensemble_distance;
use crate::error::{Error, Result};
use crate::manifold::ReducedSystem;
use crate::rng::Stream;
use crate::sde::{simulate_ensemble, snapshot_at, step_into, Dynamics, Ensemble, InitSampler, SlowFastSystem, Snapshot};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub n_total: u64,
}

impl Histogram {
    /// Counts `data` into bins `[e_i, e_{i+1})`, the last bin closed. Values
    /// outside the edges are clamped into the end bins.
    pub fn new(edges: Vec<f64>, data: &[f64]) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::arg("histogram edges must be strictly increasing with at least two entries"));
        }
        let nb = edges.len() - 1;
        let mut counts = vec![0u64; nb];
        for &v in data {
            let b = edges.partition_point(|e| *e <= v).saturating_sub(1).min(nb - 1);
            counts[b] += 1;
        }
        Ok(Self {
            edges,
            counts,
            n_total: data.len() as u64,
        })
    }

    pub fn density(&self) -> Vec<f64> {
        let n = self.n_total.max(1) as f64;
        self.counts
            .iter()
            .zip(self.edges.windows(2))
            .map(|(c, w)| *c as f64 / (n * (w[1] - w[0])))
            .collect()
    }
}

fn sorted(data: &[f64]) -> Vec<f64> {
    let mut v = data.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

fn quantile_sorted(s: &[f64], q: f64) -> f64 {
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

const MAX_BINS: usize = 200;

/// Shared bin edges with the Freedman–Diaconis width `2·IQR·n^{−1/3}`.
pub fn freedman_diaconis_edges(pooled: &[f64]) -> Result<Vec<f64>> {
    if pooled.is_empty() {
        return Err(Error::Empty("histogram data".into()));
    }
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("histogram data must be finite"));
    }
    let s = sorted(pooled);
    let (lo, hi) = (s[0], s[s.len() - 1]);
    if hi == lo {
        return Ok(vec![lo - 0.5, lo + 0.5]);
    }
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let width = 2.0 * iqr / (s.len() as f64).cbrt();
    let bins = if width > 0.0 {
        (((hi - lo) / width).ceil() as usize).clamp(1, MAX_BINS)
    } else {
        (s.len() as f64).sqrt().ceil() as usize
    };
    let step = (hi - lo) / bins as f64;
    Ok((0..=bins).map(|i| if i == bins { hi } else { lo + step * i as f64 }).collect())
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("KS sample".into()));
    }
    let (sa, sb) = (sorted(a), sorted(b));
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < sa.len() && j < sb.len() {
        let v = sa[i].min(sb[j]);
        while i < sa.len() && sa[i] <= v {
            i += 1;
        }
        while j < sb.len() && sb[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateComparison {
    pub dim: usize,
    pub ks: f64,
    pub reduced_mean: f64,
    pub reduced_std: f64,
    pub original_mean: f64,
    pub original_std: f64,
    pub reduced_hist: Histogram,
    pub original_hist: Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeComparison {
    pub time_index: usize,
    pub time: f64,
    pub energy_distance: f64,
    pub coords: Vec<CoordinateComparison>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub slow_dims: Vec<usize>,
    pub n_reduced: usize,
    pub n_original: usize,
    pub dt: f64,
    pub times: Vec<TimeComparison>,
}

impl ComparisonReport {
    pub fn max_ks(&self) -> f64 {
        self.times
            .iter()
            .flat_map(|t| t.coords.iter().map(|c| c.ks))
            .fold(0.0, f64::max)
    }
}

/// Compares the reduced ensemble against the original's `slow_dims` at each
/// requested time index.
pub fn compare_distributions(
    reduced: &Ensemble,
    original: &Ensemble,
    slow_dims: &[usize],
    time_indices: &[usize],
) -> Result<ComparisonReport> {
    if reduced.dim() != slow_dims.len() {
        return Err(Error::dims(slow_dims.len(), reduced.dim(), "reduced ensemble dimension"));
    }
    if let Some(&d) = slow_dims.iter().find(|&&d| d >= original.dim()) {
        return Err(Error::OutOfRange {
            index: d,
            max: original.dim() - 1,
        });
    }
    if (reduced.dt() - original.dt()).abs() > 1e-12 * original.dt().abs() {
        return Err(Error::arg(format!(
            "ensembles use different dt ({} vs {})",
            reduced.dt(),
            original.dt()
        )));
    }
    let mut times = Vec::with_capacity(time_indices.len());
    for &k in time_indices {
        let r = snapshot_at(reduced, k)?;
        let o_full = snapshot_at(original, k)?;
        let o = Snapshot::new(
            k,
            nalgebra::DMatrix::from_fn(o_full.n_samples(), slow_dims.len(), |i, a| o_full.points[(i, slow_dims[a])]),
        )?;
        let mut coords = Vec::with_capacity(slow_dims.len());
        for (a, &d) in slow_dims.iter().enumerate() {
            let (rc, oc) = (r.column(a), o.column(a));
            let pooled: Vec<f64> = rc.iter().chain(&oc).copied().collect();
            let edges = freedman_diaconis_edges(&pooled)?;
            let (rm, rs) = mean_std(&rc);
            let (om, os) = mean_std(&oc);
            coords.push(CoordinateComparison {
                dim: d,
                ks: ks_statistic(&rc, &oc)?,
                reduced_mean: rm,
                reduced_std: rs,
                original_mean: om,
                original_std: os,
                reduced_hist: Histogram::new(edges.clone(), &rc)?,
                original_hist: Histogram::new(edges, &oc)?,
            });
        }
        times.push(TimeComparison {
            time_index: k,
            time: original.t0() + k as f64 * original.dt(),
            energy_distance: ensemble_distance(&r, &o)?,
            coords,
        });
    }
    Ok(ComparisonReport {
        slow_dims: slow_dims.to_vec(),
        n_reduced: reduced.len(),
        n_original: original.len(),
        dt: original.dt(),
        times,
    })
}

/// `n` reduced paths and `n` original paths from one manifold point, with
/// independent seeds for the two sides.
#[allow(clippy::too_many_arguments)]
pub fn paired_ensembles(
    reduced: &ReducedSystem,
    original: &SlowFastSystem,
    z0: &[f64],
    n: usize,
    dt: f64,
    n_steps: usize,
    seed: u64,
) -> Result<(Ensemble, Ensemble)> {
    let slow = &reduced.manifold().slow_dims;
    if z0.len() != original.dim() {
        return Err(Error::dims(original.dim(), z0.len(), "initial state"));
    }
    let x0: Vec<f64> = slow.iter().map(|&d| z0[d]).collect();
    let red = simulate_ensemble(reduced, &InitSampler::fixed_point(&x0), n, dt, n_steps, seed)?;
    let orig = simulate_ensemble(
        original,
        &InitSampler::fixed_point(z0),
        n,
        dt,
        n_steps,
        seed.wrapping_add(0x9E37_79B9),
    )?;
    Ok((red, orig))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    pub dt: f64,
    /// Euclidean slow-coordinate error at each step, starting with step 0.
    pub errors: Vec<f64>,
    pub reduced: Vec<Vec<f64>>,
    pub original: Vec<Vec<f64>>,
    pub rmse: f64,
}

/// Simulates the reduced and the original system from `z0` with common
/// random numbers: both consume the same slow-noise increments each step.
pub fn track_trajectory<R: Dynamics + ?Sized>(
    reduced: &R,
    original: &SlowFastSystem,
    slow_dims: &[usize],
    z0: &[f64],
    dt: f64,
    n_steps: usize,
    seed: u64,
) -> Result<TrackingReport> {
    let n = original.dim();
    let k = reduced.dim();
    if z0.len() != n {
        return Err(Error::dims(n, z0.len(), "initial state"));
    }
    if slow_dims.len() != k {
        return Err(Error::dims(k, slow_dims.len(), "slow dims vs reduced dimension"));
    }
    if !(dt > 0.0) {
        return Err(Error::arg("dt must be positive"));
    }
    let mut stream = Stream::new(seed, 0x7AC);
    let sqrt_dt = dt.sqrt();
    let mut z = z0.to_vec();
    let mut x: Vec<f64> = slow_dims.iter().map(|&d| z0[d]).collect();
    let (mut zn, mut xn) = (vec![0.0; n], vec![0.0; k]);
    let (mut dz, mut dx) = (vec![0.0; n], vec![0.0; k]);
    let mut noise = vec![0.0; n];
    let mut slow_noise = vec![0.0; k];
    let mut errors = Vec::with_capacity(n_steps + 1);
    let mut red_path = Vec::with_capacity(n_steps + 1);
    let mut orig_path = Vec::with_capacity(n_steps + 1);
    let err = |x: &[f64], z: &[f64]| -> f64 {
        slow_dims
            .iter()
            .zip(x)
            .map(|(&d, v)| (v - z[d]) * (v - z[d]))
            .sum::<f64>()
            .sqrt()
    };
    errors.push(err(&x, &z));
    red_path.push(x.clone());
    orig_path.push(slow_dims.iter().map(|&d| z[d]).collect());
    for step in 0..n_steps {
        stream.fill_normal(&mut noise);
        for (a, &d) in slow_dims.iter().enumerate() {
            slow_noise[a] = noise[d];
        }
        step_into(original, &z, dt, sqrt_dt, &noise, &mut dz, &mut zn, step)?;
        step_into(reduced, &x, dt, sqrt_dt, &slow_noise, &mut dx, &mut xn, step)?;
        std::mem::swap(&mut z, &mut zn);
        std::mem::swap(&mut x, &mut xn);
        errors.push(err(&x, &z));
        red_path.push(x.clone());
        orig_path.push(slow_dims.iter().map(|&d| z[d]).collect());
    }
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
    Ok(TrackingReport {
        dt,
        errors,
        reduced: red_path,
        original: orig_path,
        rmse,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: Vec<f64>,
    pub reduced_std: Vec<f64>,
    /// Normal-theory standard error of each sample std, `s / √(2(n − 1))`.
    pub reduced_std_se: Vec<f64>,
    pub original_std: Vec<f64>,
    pub ks: Vec<f64>,
    pub reduced_hist: Vec<Histogram>,
    pub original_hist: Vec<Histogram>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub time_index: usize,
    pub n_samples: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Whether the reduced std increases along the sweep in every slow
    /// coordinate, tolerating decreases within two standard errors of the
    /// difference.
    pub fn monotone(&self) -> bool {
        self.rows.windows(2).all(|w| {
            (0..w[0].reduced_std.len()).all(|a| {
                let diff = w[1].reduced_std[a] - w[0].reduced_std[a];
                let se = w[0].reduced_std_se[a].hypot(w[1].reduced_std_se[a]);
                diff > 0.0 || diff > -2.0 * se
            })
        })
    }

    /// Whether the reduced std increases along the sweep with no tolerance.
    pub fn strictly_monotone(&self) -> bool {
        self.rows.windows(2).all(|w| {
            w[0].reduced_std
                .iter()
                .zip(&w[1].reduced_std)
                .all(|(a, b)| b > a)
        })
    }
}

/// For each slow noise vector, simulates reduced and original ensembles
/// from `z0` and reports dispersion at `time_index`.
pub fn noise_sweep(
    reduced: &ReducedSystem,
    original: &SlowFastSystem,
    z0: &[f64],
    sigma_list: &[Vec<f64>],
    dt: f64,
    time_index: usize,
    n_samples: usize,
    seed: u64,
) -> Result<SweepReport> {
    if sigma_list.is_empty() {
        return Err(Error::Empty("noise sweep list".into()));
    }
    if sigma_list.iter().flatten().any(|s| !(*s > 0.0)) {
        return Err(Error::arg("sweep noise intensities must be positive"));
    }
    if n_samples < 2 {
        return Err(Error::arg("noise sweep needs at least two samples"));
    }
    let slow = reduced.manifold().slow_dims.clone();
    let mut rows = Vec::with_capacity(sigma_list.len());
    for sigma in sigma_list {
        let red = reduced.with_sigma(sigma.clone())?;
        let orig = original.with_sigma_slow(sigma.clone())?;
        let (re, oe) = paired_ensembles(&red, &orig, z0, n_samples, dt, time_index.max(1), seed)?;
        let rs = snapshot_at(&re, time_index)?;
        let os = snapshot_at(&oe, time_index)?;
        let mut row = SweepRow {
            sigma: sigma.clone(),
            reduced_std: vec![],
            reduced_std_se: vec![],
            original_std: vec![],
            ks: vec![],
            reduced_hist: vec![],
            original_hist: vec![],
        };
        for (a, &d) in slow.iter().enumerate() {
            let rc = rs.column(a);
            let oc = os.column(d);
            let (_, sr) = mean_std(&rc);
            let (_, so) = mean_std(&oc);
            let pooled: Vec<f64> = rc.iter().chain(&oc).copied().collect();
            let edges = freedman_diaconis_edges(&pooled)?;
            row.reduced_std.push(sr);
            row.reduced_std_se.push(sr / (2.0 * (n_samples as f64 - 1.0)).sqrt());
            row.original_std.push(so);
            row.ks.push(ks_statistic(&rc, &oc)?);
            row.reduced_hist.push(Histogram::new(edges.clone(), &rc)?);
            row.original_hist.push(Histogram::new(edges, &oc)?);
        }
        rows.push(row);
    }
    Ok(SweepReport {
        time_index,
        n_samples,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_basics() {
        let a = [0.1, 0.4, 0.7, 0.2];
        assert_eq!(ks_statistic(&a, &a).unwrap(), 0.0);
        assert_eq!(ks_statistic(&[0.1, 0.5, 0.9], &[2.1, 2.5]).unwrap(), 1.0);
        assert!(ks_statistic(&[], &a).is_err());
        // ties across samples are resolved together
        assert_eq!(ks_statistic(&[1.0, 2.0], &[1.0, 2.0, 2.0]).unwrap(), 0.5 - 1.0 / 3.0);
    }

    #[test]
    fn ks_against_brute_force() {
        let mut s = Stream::new(1, 0);
        let a: Vec<f64> = (0..200).map(|_| (s.normal() * 4.0).round() / 4.0).collect();
        let b: Vec<f64> = (0..150).map(|_| (0.3 + s.normal() * 4.0).round() / 4.0).collect();
        let cdf = |x: &[f64], t: f64| x.iter().filter(|v| **v <= t).count() as f64 / x.len() as f64;
        let brute = a
            .iter()
            .chain(&b)
            .map(|&t| (cdf(&a, t) - cdf(&b, t)).abs())
            .fold(0.0, f64::max);
        assert_eq!(ks_statistic(&a, &b).unwrap(), brute);
        assert_eq!(ks_statistic(&b, &a).unwrap(), brute);
    }

    #[test]
    fn histogram_conserves_counts() {
        let h = Histogram::new(vec![0.0, 1.0, 2.0], &[0.0, 0.5, 1.0, 2.0, 5.0, -1.0]).unwrap();
        assert_eq!(h.counts, vec![3, 3]);
        assert_eq!(h.n_total, 6);
        assert!(Histogram::new(vec![0.0, 0.0], &[]).is_err());
    }

    #[test]
    fn freedman_diaconis_edges_cover_data() {
        let mut s = Stream::new(2, 0);
        let x: Vec<f64> = (0..1000).map(|_| s.normal()).collect();
        let e = freedman_diaconis_edges(&x).unwrap();
        let (lo, hi) = x.iter().fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
        assert_eq!((e[0], *e.last().unwrap()), (lo, hi));
        assert!(e.windows(2).all(|w| w[0] < w[1]));
        // IQR of N(0,1) is 1.349, so the width is close to 2·1.349/10
        let w = e[1] - e[0];
        assert!((w - 0.27).abs() < 0.05, "{w}");
        assert_eq!(freedman_diaconis_edges(&[3.0, 3.0]).unwrap(), vec![2.5, 3.5]);
    }

    struct Ou1(Vec<f64>);

    impl Dynamics for Ou1 {
        fn dim(&self) -> usize {
            1
        }
        fn drift(&self, z: &[f64], out: &mut [f64]) {
            out[0] = -z[0];
        }
        fn noise_scale(&self) -> &[f64] {
            &self.0
        }
    }

    #[test]
    fn identical_slow_dynamics_track_exactly() {
        let rep = track_trajectory(&Ou1(vec![0.7]), &sys_from_ou(0.7), &[0], &[0.4, 0.0], 1e-3, 500, 3).unwrap();
        assert_eq!(rep.rmse, 0.0);
        assert_eq!(rep.errors.len(), 501);
        assert!(rep.reduced.iter().any(|x| x[0] != 0.4));
        let other = track_trajectory(&Ou1(vec![0.5]), &sys_from_ou(0.7), &[0], &[0.4, 0.0], 1e-3, 500, 3).unwrap();
        assert!(other.rmse > 0.0);
    }

    /// A slow-fast system whose slow block is `ou(σ)` and ignores `y`.
    fn sys_from_ou(sigma: f64) -> SlowFastSystem {
        use crate::sde::PolynomialField;
        use std::sync::Arc;
        let f = PolynomialField::from_terms(2, &[&[(-1.0, &[1, 0])]]).unwrap();
        let g = PolynomialField::from_terms(2, &[&[(-1.0, &[0, 1])]]).unwrap();
        SlowFastSystem::new(0.1, Arc::new(f), Arc::new(g), vec![sigma], vec![0.3]).unwrap()
    }
}
