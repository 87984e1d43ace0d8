//! Property checks shared by the randomized suite and the acceptance run.
//! Each returns the measured quantity so callers can apply their bound.

#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};

use autosde::basis::{convert_coefficients, BasisDictionary, BasisKind};
use autosde::checkpoint::{Checkpoint, TrainingMetadata};
use autosde::evaluate::ks_statistic;
use autosde::autosde::ensemble_distance;
use autosde::manifold::{fit_manifold, pod_basis, ManifoldOptions};
use autosde::neural::{gradient_check, window_loss, AdamState, Architecture, AutoSdeModel};
use autosde::rng::Stream;
use autosde::sde::{simulate_ensemble, FnField, InitSampler, PolynomialField, SlowFastSystem, Snapshot};

fn normals(stream: &mut Stream, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    stream.fill_normal(&mut v);
    v
}

/// Random model, window and targets for `D = 2`, `m = 11`.
pub fn grad_check_error(seed: u64, l: usize) -> f64 {
    let mut s = Stream::new(seed, 1);
    let (m, d) = (11, 2);
    let shift = normals(&mut s, d);
    let scale = (0..d).map(|_| s.uniform_range(0.5, 2.0)).collect();
    let model = AutoSdeModel::new(Architecture::standard(d, 2), shift, scale, seed).unwrap();
    let window = normals(&mut s, m * d);
    let overlap = normals(&mut s, (m - l + 1) * d);
    let extension = normals(&mut s, (l - 1) * d);
    gradient_check(&model, &window, &overlap, &extension, m, l, 1e-6, seed).unwrap()
}

/// True when zero-gradient steps from a fresh state leave every parameter
/// bit-identical.
pub fn adam_zero_gradient_is_fixed(seed: u64, n: usize, steps: usize) -> bool {
    let mut s = Stream::new(seed, 2);
    let start = normals(&mut s, n);
    let mut params = start.clone();
    let mut adam = AdamState::new(n, 1e-3);
    let zero = vec![0.0; n];
    for _ in 0..steps {
        adam.step(&mut params, &zero).unwrap();
    }
    params.iter().zip(&start).all(|(a, b)| a.to_bits() == b.to_bits())
}

/// Losses and output gradients of the two parts, computed separately by
/// zeroing the other part's residual, against the combined evaluation.
/// Returns true on exact equality.
pub fn loss_is_additive(seed: u64, m: usize, l: usize, d: usize) -> bool {
    let mut s = Stream::new(seed, 3);
    let out = normals(&mut s, m * d);
    let overlap = normals(&mut s, (m - l + 1) * d);
    let extension = normals(&mut s, (l - 1) * d);
    let split = (m - l + 1) * d;
    let mut g = vec![0.0; m * d];
    let both = window_loss(&out, &overlap, &extension, m, l, d, Some(&mut g)).unwrap();
    let mut g_ae = vec![0.0; m * d];
    let ae = window_loss(&out, &overlap, &out[split..], m, l, d, Some(&mut g_ae)).unwrap();
    let mut g_sde = vec![0.0; m * d];
    let sde = window_loss(&out, &out[..split], &extension, m, l, d, Some(&mut g_sde)).unwrap();
    ae.sde == 0.0
        && sde.ae == 0.0
        && both.ae == ae.ae
        && both.sde == sde.sde
        && both.total() == ae.ae + sde.sde
        && g.iter().zip(g_ae.iter().zip(&g_sde)).all(|(a, (b, c))| *a == b + c)
}

/// Euler–Maruyama OU `dx = −x dt + σ dW` from `x0`: returns the mean and
/// variance errors at `t` in units of their standard errors.
pub fn ou_moment_zscores(seed: u64, sigma: f64, x0: f64, n_traj: usize, dt: f64, n_steps: usize) -> (f64, f64) {
    let sys = SlowFastSystem::new(
        1.0,
        Arc::new(FnField::new(1, |x, _, out| out[0] = -x[0])),
        Arc::new(PolynomialField::zero(2, 1)),
        vec![sigma],
        vec![0.0],
    )
    .unwrap();
    let ens = simulate_ensemble(&sys, &InitSampler::fixed_point(&[x0, 0.0]), n_traj, dt, n_steps, seed).unwrap();
    let xs: Vec<f64> = ens.trajectories().iter().map(|t| t.states[(n_steps, 0)]).collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = dt * n_steps as f64;
    let true_mean = x0 * (-t).exp();
    let true_var = sigma * sigma * (1.0 - (-2.0 * t).exp()) / 2.0;
    let se_mean = (true_var / n).sqrt();
    let se_var = true_var * (2.0 / (n - 1.0)).sqrt();
    ((mean - true_mean).abs() / se_mean, (var - true_var).abs() / se_var)
}

fn cloud(seed: u64, n: usize, d: usize, shift: f64) -> Snapshot {
    let mut s = Stream::new(seed, 4);
    let v: Vec<f64> = normals(&mut s, n * d).into_iter().map(|x| x + shift).collect();
    Snapshot::new(0, DMatrix::from_row_slice(n, d, &v)).unwrap()
}

/// Largest violation of the metric axioms of KS and of the square root of
/// the energy distance over three random clouds; zero when all hold.
pub fn metric_axiom_violation(seed: u64, n: usize, d: usize) -> f64 {
    let a = cloud(seed, n, d, 0.0);
    let b = cloud(seed + 1, n + 3, d, 0.3);
    let c = cloud(seed + 2, n + 7, d, -0.2);
    let e = |p: &Snapshot, q: &Snapshot| ensemble_distance(p, q).unwrap().sqrt();
    let mut worst: f64 = 0.0;
    // identity on the distance itself: the square root would magnify rounding
    worst = worst.max(ensemble_distance(&a, &a).unwrap());
    worst = worst.max((e(&a, &b) - e(&b, &a)).abs());
    worst = worst.max(e(&a, &c) - e(&a, &b) - e(&b, &c) - 1e-12);
    for j in 0..d {
        let col = |s: &Snapshot| s.points.column(j).iter().copied().collect::<Vec<_>>();
        let (ca, cb, cc) = (col(&a), col(&b), col(&c));
        let k = |p: &[f64], q: &[f64]| ks_statistic(p, q).unwrap();
        worst = worst.max(k(&ca, &ca));
        worst = worst.max((k(&ca, &cb) - k(&cb, &ca)).abs());
        worst = worst.max(k(&ca, &cc) - k(&ca, &cb) - k(&cb, &cc) - 1e-12);
        let kab = k(&ca, &cb);
        if !(0.0..=1.0).contains(&kab) {
            worst = worst.max(1.0);
        }
    }
    worst.max(0.0)
}

/// Relative errors of the POD identity `‖Z − ΦΦᵀZ‖² = Σ_{i>d} s_i²` and
/// of the singular values against the eigenvalues of `ZZᵀ`.
pub fn pod_identity_errors(seed: u64, rows: usize, cols: usize, d: usize) -> (f64, f64) {
    let mut s = Stream::new(seed, 5);
    let z = DMatrix::from_row_slice(rows, cols, &normals(&mut s, rows * cols));
    let (phi, sv) = pod_basis(&z, d).unwrap();
    let total = z.norm_squared();
    let resid = (&z - &phi * (phi.transpose() * &z)).norm_squared();
    let tail: f64 = sv[d..].iter().map(|v| v * v).sum();
    let e_identity = (resid - tail).abs() / total;
    let mut eig: Vec<f64> = SymmetricEigen::new(&z * z.transpose()).eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let e_values = eig
        .iter()
        .zip(&sv)
        .map(|(l, v)| (l - v * v).abs() / total)
        .fold(0.0, f64::max);
    (e_identity, e_values)
}

/// Max coefficient error of a manifold fit to noiseless data from a random
/// quadratic `y = c0 + c1 x + c2 x²` (coefficients kept above the threshold).
pub fn manifold_fit_error(seed: u64) -> f64 {
    let mut s = Stream::new(seed, 6);
    let coef: Vec<f64> = (0..3)
        .map(|_| {
            let mag = s.uniform_range(0.1, 2.0);
            if s.uniform() < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    let n = 200;
    let pts = DMatrix::from_fn(n, 2, |r, c| {
        let x = -3.0 + 6.0 * r as f64 / (n - 1) as f64;
        if c == 0 {
            x
        } else {
            coef[0] + coef[1] * x + coef[2] * x * x
        }
    });
    let fit = fit_manifold(&Snapshot::new(0, pts).unwrap(), &[0], &ManifoldOptions::new(2)).unwrap();
    fit.coeffs.iter().zip(&coef).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Max error of monomial → Hermite → monomial over random coefficients.
pub fn basis_round_trip_error(seed: u64, dim: usize, degree: u32) -> f64 {
    let mono = BasisDictionary::new(dim, degree, BasisKind::Monomial).unwrap();
    let herm = BasisDictionary::new(dim, degree, BasisKind::Hermite).unwrap();
    let mut s = Stream::new(seed, 7);
    let c = normals(&mut s, mono.len());
    let h = convert_coefficients(&mono, &herm, &c).unwrap();
    let back = convert_coefficients(&herm, &mono, &h).unwrap();
    back.iter().zip(&c).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// True when a JSON checkpoint round trip preserves every parameter bit
/// and the architecture.
pub fn checkpoint_round_trip_exact(seed: u64, latent: usize) -> bool {
    let mut s = Stream::new(seed, 8);
    let mut model = AutoSdeModel::new(Architecture::standard(3, latent), normals(&mut s, 3), vec![1.0, 2.0, 0.5], seed).unwrap();
    // push values across many magnitudes
    for p in model.params.iter_mut() {
        *p *= 10f64.powf(s.uniform_range(-12.0, 12.0));
    }
    let text = Checkpoint::from_model(&model, TrainingMetadata::default()).to_json().unwrap();
    let back = Checkpoint::from_json(&text).unwrap().into_model().unwrap();
    back.arch == model.arch
        && back.layout == model.layout
        && back.params.len() == model.params.len()
        && back.params.iter().zip(&model.params).all(|(a, b)| a.to_bits() == b.to_bits())
        && back.shift.iter().zip(&model.shift).all(|(a, b)| a.to_bits() == b.to_bits())
}
