//! Experiment recipes.
//!
//! A recipe is a TOML file with one table per stage. Unknown keys are
//! rejected so typos fail loudly.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autosde::TrainConfig;
use crate::basis::BasisKind;
use crate::error::{Error, Result};
use crate::manifold::ManifoldOptions;
use crate::neural::{Activation, Architecture};
use crate::regression::SparsityOptions;
use crate::sde::{InitRange, InitSampler, PolyTerm, PolynomialField, SlowFastSystem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Builtin {
    Example1,
    Example2,
}

/// Either a built-in system or inline polynomial drifts over the full state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(default)]
    pub builtin: Option<Builtin>,
    pub epsilon: f64,
    pub sigma_slow: Vec<f64>,
    pub sigma_fast: Vec<f64>,
    /// Per slow coordinate, a list of `{ coef, powers }` monomials.
    #[serde(default)]
    pub slow_drift: Option<Vec<Vec<PolyTerm>>>,
    #[serde(default)]
    pub fast_drift: Option<Vec<Vec<PolyTerm>>>,
}

impl SystemConfig {
    pub fn build(&self) -> Result<SlowFastSystem> {
        let (ns, nf) = (self.sigma_slow.len(), self.sigma_fast.len());
        match (&self.builtin, &self.slow_drift, &self.fast_drift) {
            (Some(b), None, None) => {
                let expected = match b {
                    Builtin::Example1 => (1, 1),
                    Builtin::Example2 => (2, 1),
                };
                if (ns, nf) != expected {
                    return Err(Error::arg(format!(
                        "system.sigma_slow / sigma_fast lengths ({ns}, {nf}) do not fit {b:?} (expected {expected:?})"
                    )));
                }
                let proto = match b {
                    Builtin::Example1 => SlowFastSystem::example1(1.0, 1.0, self.epsilon.max(f64::MIN_POSITIVE)),
                    Builtin::Example2 => SlowFastSystem::example2(1.0, 1.0, 1.0, self.epsilon.max(f64::MIN_POSITIVE)),
                };
                SlowFastSystem::new(
                    self.epsilon,
                    proto.drift_slow().clone(),
                    proto.drift_fast().clone(),
                    self.sigma_slow.clone(),
                    self.sigma_fast.clone(),
                )
            }
            (None, Some(f), Some(g)) => {
                if f.len() != ns || g.len() != nf {
                    return Err(Error::arg("system: drift output counts must match sigma_slow / sigma_fast lengths"));
                }
                SlowFastSystem::new(
                    self.epsilon,
                    Arc::new(PolynomialField::new(ns + nf, f.clone())?),
                    Arc::new(PolynomialField::new(ns + nf, g.clone())?),
                    self.sigma_slow.clone(),
                    self.sigma_fast.clone(),
                )
            }
            _ => Err(Error::arg(
                "system: give either `builtin` or both `slow_drift` and `fast_drift`",
            )),
        }
    }

    pub fn slow_dim(&self) -> usize {
        self.sigma_slow.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub dt: f64,
    pub n_steps: usize,
    pub n_traj: usize,
    /// `[lo, hi]` per state coordinate.
    pub init: Vec<[f64; 2]>,
    pub seed: u64,
    /// Every `stride`-th simulated row forms the training windows.
    #[serde(default = "one")]
    pub stride: usize,
}

impl SimulationConfig {
    pub fn sampler(&self) -> InitSampler {
        InitSampler(self.init.iter().map(|[lo, hi]| InitRange::uniform(*lo, *hi)).collect())
    }
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentificationConfig {
    pub degree: u32,
    #[serde(default = "monomial")]
    pub kind: BasisKind,
    pub threshold: f64,
    #[serde(default)]
    pub min_t_stat: Option<f64>,
    #[serde(default = "ten")]
    pub max_sweeps: usize,
    /// Fit only the first this-many simulated steps of each trajectory.
    #[serde(default)]
    pub window_steps: Option<usize>,
}

fn monomial() -> BasisKind {
    BasisKind::Monomial
}

fn ten() -> usize {
    10
}

impl IdentificationConfig {
    pub fn sparsity(&self) -> SparsityOptions {
        SparsityOptions {
            threshold: self.threshold,
            max_sweeps: self.max_sweeps,
            min_t_stat: self.min_t_stat,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "enc_widths")]
    pub encoder_widths: Vec<usize>,
    #[serde(default = "dec_widths")]
    pub decoder_widths: Vec<usize>,
    /// Defaults to the slow dimension plus one.
    #[serde(default)]
    pub latent_dim: Option<usize>,
    #[serde(default = "lstm_hidden")]
    pub lstm_hidden: usize,
}

fn enc_widths() -> Vec<usize> {
    vec![32, 16]
}

fn dec_widths() -> Vec<usize> {
    vec![16, 32]
}

fn lstm_hidden() -> usize {
    32
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            encoder_widths: enc_widths(),
            decoder_widths: dec_widths(),
            latent_dim: None,
            lstm_hidden: lstm_hidden(),
        }
    }
}

impl NetworkConfig {
    pub fn architecture(&self, input_dim: usize, slow_dim: usize) -> Architecture {
        Architecture {
            input_dim,
            encoder_widths: self.encoder_widths.clone(),
            latent_dim: self.latent_dim.unwrap_or(slow_dim + 1),
            lstm_hidden: self.lstm_hidden,
            decoder_widths: self.decoder_widths.clone(),
            hidden_activation: Activation::Tanh,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftChoice {
    Estimated,
    Known,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub dt: f64,
    pub time_indices: Vec<usize>,
    pub n_samples: usize,
    /// Slow starting point; the fast part is `ĥ(x0)`.
    pub x0: Vec<f64>,
    pub sigma_sweep: Vec<Vec<f64>>,
    pub sweep_time_index: usize,
    pub track_steps: usize,
    pub seed: u64,
    #[serde(default = "estimated")]
    pub drift: DriftChoice,
}

fn estimated() -> DriftChoice {
    DriftChoice::Estimated
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub system: SystemConfig,
    pub simulation: SimulationConfig,
    pub identification: IdentificationConfig,
    pub training: TrainConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    pub manifold: ManifoldOptions,
    pub evaluation: EvaluationConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Replaces every seed in the recipe.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.simulation.seed = seed;
        self.training.seed = seed;
        self.evaluation.seed = seed;
        self
    }

    pub fn slow_dims(&self) -> Vec<usize> {
        (0..self.system.slow_dim()).collect()
    }

    pub fn state_dim(&self) -> usize {
        self.system.sigma_slow.len() + self.system.sigma_fast.len()
    }

    /// Field-level consistency checks beyond what parsing enforces.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| Error::arg(format!("{name}: {msg}"));
        self.system.build()?;
        let n = self.state_dim();
        let s = &self.simulation;
        if !(s.dt > 0.0) {
            return Err(field("simulation.dt", "must be positive"));
        }
        if s.n_steps == 0 || s.n_traj == 0 {
            return Err(field("simulation", "n_steps and n_traj must be at least 1"));
        }
        if s.init.len() != n {
            return Err(field("simulation.init", &format!("needs {n} ranges, found {}", s.init.len())));
        }
        if s.init.iter().any(|[lo, hi]| !(lo <= hi)) {
            return Err(field("simulation.init", "each range needs lo ≤ hi"));
        }
        if s.stride == 0 || s.n_steps % s.stride != 0 {
            return Err(field("simulation.stride", "must divide n_steps"));
        }
        let id = &self.identification;
        if id.window_steps.is_some_and(|w| w == 0 || w > s.n_steps) {
            return Err(field("identification.window_steps", "must lie in 1..=simulation.n_steps"));
        }
        if !(id.threshold >= 0.0) {
            return Err(field("identification.threshold", "must be nonnegative"));
        }
        self.training.validate()?;
        if self.training.m != s.n_steps / s.stride + 1 {
            return Err(field(
                "training.m",
                &format!("must equal n_steps / stride + 1 = {}", s.n_steps / s.stride + 1),
            ));
        }
        if let Some(dom) = &self.manifold.domain {
            if dom.len() != self.system.slow_dim() {
                return Err(field("manifold.domain", "needs one range per slow coordinate"));
            }
        }
        let e = &self.evaluation;
        if !(e.dt > 0.0) || e.n_samples < 2 || e.time_indices.is_empty() {
            return Err(field("evaluation", "needs dt > 0, n_samples ≥ 2 and at least one time index"));
        }
        if e.x0.len() != self.system.slow_dim() {
            return Err(field("evaluation.x0", "needs one value per slow coordinate"));
        }
        if e.sigma_sweep.iter().any(|v| v.len() != self.system.slow_dim()) {
            return Err(field("evaluation.sigma_sweep", "each entry needs one value per slow coordinate"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML rendering of the parsed recipe.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
