//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line to
//! stderr (uncaptured) and then asserts.
//!
//! The tests share a lock so runtimes are measured one at a time.

mod common;

use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use autosde::config::ExperimentConfig;
use autosde::km::EstimatedSde;
use autosde::pipeline;

static SERIAL: Mutex<()> = Mutex::new(());

const NN_SEEDS: [u64; 3] = [11, 12, 13];

fn report(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} | {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn recipe(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&path).unwrap()
}

fn names(cfg: &ExperimentConfig) -> Vec<String> {
    autosde::stages::var_names(cfg)
}

/// `(term, drift, σ²)` rows with nonzero drift, and the nonzero σ² terms,
/// for identified coordinate `k`.
fn supports(esde: &EstimatedSde, cfg: &ExperimentConfig, k: usize) -> (Vec<(String, f64)>, Vec<String>) {
    let table = esde.table(&names(cfg)).unwrap();
    let drift = table.iter().filter(|r| r.1[k] != 0.0).map(|r| (r.0.clone(), r.1[k])).collect();
    let diff = table.iter().filter(|r| r.2[k] != 0.0).map(|r| r.0.clone()).collect();
    (drift, diff)
}

fn support_matches(found: &[(String, f64)], expected: &[(&str, f64)], tol: f64) -> bool {
    found.len() == expected.len()
        && expected
            .iter()
            .all(|(t, v)| found.iter().any(|(ft, fv)| ft == t && (fv - v).abs() <= tol))
}

fn fmt_terms(t: &[(String, f64)]) -> String {
    t.iter().map(|(n, v)| format!("{n}:{v:.4}")).collect::<Vec<_>>().join(" ")
}

#[test]
fn criterion_1_example1_identification() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = recipe("example1.cfg");
    let t = Instant::now();
    let ens = pipeline::simulate(&cfg).unwrap();
    let esde = pipeline::identify(&cfg, &ens).unwrap();
    let elapsed = t.elapsed();
    let (drift, diff) = supports(&esde, &cfg, 0);
    let sigma = esde.sigma_constant()[0];
    let pass = support_matches(&drift, &[("x", 1.0), ("xy", -1.0)], 0.10)
        && diff == ["1"]
        && (sigma - 1.0).abs() <= 0.10
        && elapsed < Duration::from_secs(60);
    report(
        1,
        pass,
        &format!("x-drift {} | sigma {sigma:.4} | diffusion terms {diff:?} | {elapsed:.1?}", fmt_terms(&drift)),
    );
    assert!(pass);
}

#[test]
fn criterion_2_example2_identification() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = recipe("example2.cfg");
    let t = Instant::now();
    let ens = pipeline::simulate(&cfg).unwrap();
    let esde = pipeline::identify(&cfg, &ens).unwrap();
    let elapsed = t.elapsed();
    let (d1, s1) = supports(&esde, &cfg, 0);
    let (d2, s2) = supports(&esde, &cfg, 1);
    let sigma = esde.sigma_constant();
    let pass = support_matches(&d1, &[("x1", 1.0), ("y", 1.0), ("x1x2", -0.5)], 0.15)
        && support_matches(&d2, &[("x2", 1.0), ("x1^2", -1.0), ("y^2", 1.0)], 0.15)
        && s1 == ["1"]
        && s2 == ["1"]
        && (sigma[0] - 1.0).abs() <= 0.15
        && (sigma[1] - 2.0).abs() <= 0.15
        && elapsed < Duration::from_secs(300);
    report(
        2,
        pass,
        &format!(
            "x1-drift {} | x2-drift {} | sigma ({:.4}, {:.4}) | {elapsed:.1?}",
            fmt_terms(&d1),
            fmt_terms(&d2),
            sigma[0],
            sigma[1]
        ),
    );
    assert!(pass);
}

struct ExampleOutcome {
    manifold_passes: usize,
    manifold_detail: Vec<String>,
    max_ks: f64,
    monotone: bool,
    sweep_detail: String,
}

/// Trains every NN seed on one simulated and identified ensemble, checks
/// the manifold per seed, and evaluates the configured seed.
fn run_example(file: &str, manifold_ok: impl Fn(&[(String, Vec<f64>)]) -> bool) -> ExampleOutcome {
    let cfg = recipe(file);
    let ens = pipeline::simulate(&cfg).unwrap();
    let esde = pipeline::identify(&cfg, &ens).unwrap();
    let slow = &names(&cfg)[..cfg.system.slow_dim()];
    let mut out = ExampleOutcome {
        manifold_passes: 0,
        manifold_detail: Vec::new(),
        max_ks: f64::NAN,
        monotone: false,
        sweep_detail: String::new(),
    };
    for seed in NN_SEEDS {
        let mut c = cfg.clone();
        c.training.seed = seed;
        let trained = pipeline::train(&c, &ens, &esde);
        let fitted = trained.and_then(|t| pipeline::reduce(&c, t.snapshots.last().unwrap(), &esde));
        let (fit, reduced) = match fitted {
            Ok(v) => v,
            Err(e) => {
                out.manifold_detail.push(format!("seed {seed}: error {e}"));
                continue;
            }
        };
        let table = fit.table(slow);
        let ok = manifold_ok(&table);
        out.manifold_passes += ok as usize;
        let terms = table
            .iter()
            .filter(|r| r.1.iter().any(|v| *v != 0.0))
            .map(|r| format!("{}:{:.4}", r.0, r.1[0]))
            .collect::<Vec<_>>()
            .join(" ");
        out.manifold_detail.push(format!("seed {seed} {} [{terms}]", if ok { "ok" } else { "off" }));
        if seed == cfg.training.seed {
            match pipeline::evaluate(&c, &reduced) {
                Ok(ev) => {
                    out.max_ks = ev.comparison.max_ks();
                    out.monotone = ev.sweep.monotone();
                    out.sweep_detail = ev
                        .sweep
                        .rows
                        .iter()
                        .map(|r| format!("{:?}->{:.3?}", r.sigma, r.reduced_std))
                        .collect::<Vec<_>>()
                        .join(" ");
                }
                Err(e) => out.sweep_detail = format!("evaluation error {e}"),
            }
        }
    }
    out
}

fn coeff(table: &[(String, Vec<f64>)], term: &str) -> f64 {
    table.iter().find(|r| r.0 == term).map_or(0.0, |r| r.1[0])
}

#[test]
fn criteria_3_to_5_manifold_and_reduced_dynamics() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let ex1 = run_example("example1.cfg", |tab| {
        let x2 = coeff(tab, "x^2");
        (0.20..=0.30).contains(&x2) && tab.iter().filter(|r| r.0 != "x^2").all(|r| r.1[0].abs() < 0.1)
    });
    let ex2 = run_example("example2.cfg", |tab| (-0.15..=-0.10).contains(&coeff(tab, "x1x2")));

    let c3 = ex1.manifold_passes >= 2 && ex2.manifold_passes >= 2;
    report(
        3,
        c3,
        &format!(
            "example1 {}/3 ({}) | example2 {}/3 ({}) | {:.0?}",
            ex1.manifold_passes,
            ex1.manifold_detail.join("; "),
            ex2.manifold_passes,
            ex2.manifold_detail.join("; "),
            t.elapsed()
        ),
    );
    let c4 = ex1.max_ks < 0.10 && ex2.max_ks < 0.10;
    report(4, c4, &format!("max KS example1 {:.4} | example2 {:.4}", ex1.max_ks, ex2.max_ks));
    let c5 = ex1.monotone && ex2.monotone;
    report(5, c5, &format!("example1 {} | example2 {}", ex1.sweep_detail, ex2.sweep_detail));
    assert!(c3, "criterion 3");
    assert!(c4, "criterion 4");
    assert!(c5, "criterion 5");
}

#[test]
fn criterion_6_property_suite() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    let grad = (0..20).map(|s| common::grad_check_error(s, 2 + (s as usize % 3))).fold(0.0, f64::max);
    check("gradient check", grad < 1e-5);
    check("adam fixed point", (0..20).all(|s| common::adam_zero_gradient_is_fixed(s, 50, 10)));
    check("loss additivity", (0..20).all(|s| common::loss_is_additive(s, 11, 2 + s as usize % 10, 3)));
    let ou = [(1, 1.0, 2.0), (2, 0.5, -1.0), (3, 2.0, 0.0)]
        .into_iter()
        .map(|(s, sig, x0)| common::ou_moment_zscores(s, sig, x0, 4000, 1e-3, 500))
        .fold(0.0f64, |m, (a, b)| m.max(a).max(b));
    check("OU moments", ou < 4.0);
    check("metric axioms", (0..20).all(|s| common::metric_axiom_violation(s, 40, 1 + s as usize % 3) <= 1e-12));
    let pod = (0..20)
        .map(|s| common::pod_identity_errors(s, 3, 50, 1 + s as usize % 3))
        .fold(0.0f64, |m, (a, b)| m.max(a).max(b));
    check("POD identity", pod < 1e-8);
    let mf = (0..20).map(common::manifold_fit_error).fold(0.0, f64::max);
    check("manifold fit exactness", mf < 1e-9);
    let basis = (0..20).map(|s| common::basis_round_trip_error(s, 1 + s as usize % 3, 4)).fold(0.0, f64::max);
    check("basis round trip", basis < 1e-10);
    check("checkpoint round trip", (0..20).all(|s| common::checkpoint_round_trip_exact(s, 2)));
    let elapsed = t.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(30);
    report(
        6,
        pass,
        &format!(
            "grad {grad:.2e} | OU max z {ou:.2} | POD {pod:.1e} | manifold {mf:.1e} | basis {basis:.1e} | failed {failures:?} | {elapsed:.1?}"
        ),
    );
    assert!(pass);
}
