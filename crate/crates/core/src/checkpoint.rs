//! JSON checkpoints of trained models.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{Activation, Architecture, AutoSdeModel, ParamBlock};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationNames {
    pub hidden: Activation,
    pub output: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

/// Free-form provenance recorded alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub generations: Option<usize>,
    pub final_distance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: String,
    pub architecture: Architecture,
    pub activations: ActivationNames,
    pub layout: Vec<ParamBlock>,
    pub parameters: Vec<f64>,
    pub normalization: Normalization,
    pub init_seed: u64,
    pub training: TrainingMetadata,
}

impl Checkpoint {
    pub fn from_model(model: &AutoSdeModel, training: TrainingMetadata) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.into(),
            architecture: model.arch.clone(),
            activations: ActivationNames {
                hidden: model.arch.hidden_activation,
                output: Activation::Identity,
            },
            layout: model.layout.clone(),
            parameters: model.params.clone(),
            normalization: Normalization {
                shift: model.shift.clone(),
                scale: model.scale.clone(),
            },
            init_seed: model.init_seed,
            training,
        }
    }

    /// Rebuilds the model and checks the stored layout against the one
    /// implied by the architecture.
    pub fn into_model(self) -> Result<AutoSdeModel> {
        if self.activations.hidden != self.architecture.hidden_activation {
            return Err(Error::Parse("hidden activation disagrees with architecture".into()));
        }
        if self.activations.output != Activation::Identity {
            return Err(Error::Parse("only identity output activation is supported".into()));
        }
        let model = AutoSdeModel {
            arch: self.architecture,
            layout: self.layout,
            params: self.parameters,
            shift: self.normalization.shift,
            scale: self.normalization.scale,
            init_seed: self.init_seed,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse(format!("checkpoint: {e}")))?;
        let found = match value.get("schema_version") {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(other) => other.to_string(),
            None => return Err(Error::Parse("checkpoint: missing schema_version".into())),
        };
        if found != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                expected: SCHEMA_VERSION.into(),
                found,
            });
        }
        serde_json::from_value(value).map_err(|e| Error::Parse(format!("checkpoint: {e}")))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(format!("checkpoint: {e}")))
    }
}

pub fn save_model(path: &Path, model: &AutoSdeModel, training: TrainingMetadata) -> Result<()> {
    let text = Checkpoint::from_model(model, training).to_json()?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(AutoSdeModel, TrainingMetadata)> {
    let cp = Checkpoint::from_json(&std::fs::read_to_string(path)?)?;
    let training = cp.training.clone();
    Ok((cp.into_model()?, training))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> AutoSdeModel {
        AutoSdeModel::new(Architecture::standard(2, 1), vec![0.1, -0.2], vec![1.5, 0.7], 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = model();
        save_model(&path, &m, TrainingMetadata::default()).unwrap();
        let (back, _) = load_model(&path).unwrap();
        assert_eq!(back.params.len(), m.params.len());
        assert!(back.params.iter().zip(&m.params).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back, m);
        let probe = nalgebra::DMatrix::from_fn(5, 2, |r, c| 0.3 * r as f64 - c as f64);
        assert_eq!(back.predict(&probe).unwrap(), m.predict(&probe).unwrap());
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let text = Checkpoint::from_model(&model(), TrainingMetadata::default()).to_json().unwrap();
        let cut = &text[..text.len() / 2];
        assert!(matches!(Checkpoint::from_json(cut), Err(Error::Parse(_))));
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let mut cp = Checkpoint::from_model(&model(), TrainingMetadata::default());
        cp.schema_version = "2".into();
        let err = Checkpoint::from_json(&cp.to_json().unwrap()).unwrap_err();
        match &err {
            Error::SchemaVersion { expected, found } => {
                assert_eq!(expected, "1");
                assert_eq!(found, "2");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("expected 1, found 2"));
    }

    #[test]
    fn corrupted_layout_is_rejected() {
        let mut cp = Checkpoint::from_model(&model(), TrainingMetadata::default());
        cp.parameters.pop();
        assert!(cp.into_model().is_err());
    }
}
