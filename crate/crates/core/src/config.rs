//! Model configuration files.
//!
//! A config bundles a template, the family architecture and a training
//! recipe in one JSON document. Parsing is strict: unknown keys are
//! rejected and the first violation is reported with its path.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderSpec;
use crate::error::{Error, Result};
use crate::family::ArchSpec;
use crate::flow::{AffineKind, FlowSpec};
use crate::template::{Descriptors, Template};
use crate::train::{LossKind, Stage, TrainConfig};
use crate::zoo;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub version: u32,
    pub template: Template,
    pub arch: ArchSpec,
    pub train: TrainConfig,
}

/// The part of a config that fixes the parameter layout.
#[derive(Serialize)]
struct ModelPart<'a> {
    template: &'a Template,
    arch: &'a ArchSpec,
}

impl ModelConfig {
    /// Validates the template and the training recipe.
    pub fn validate(&self) -> Result<Descriptors> {
        let desc = self.template.validate()?;
        self.train.check()?;
        Ok(desc)
    }

    /// SHA-256 of the template and architecture, hex encoded. Training
    /// settings are excluded so a checkpoint can be resumed with another
    /// schedule.
    pub fn digest(&self) -> String {
        let part = ModelPart {
            template: &self.template,
            arch: &self.arch,
        };
        let bytes = serde_json::to_vec(&part).expect("model config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model config serializes")
    }
}

/// Strict JSON decoding with the path of the first schema violation.
fn parse_strict<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        path: e.path().to_string(),
        msg: e.into_inner().to_string(),
    })
}

/// Parses and schema-checks a config document.
pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let cfg: ModelConfig = parse_strict(text)?;
    if cfg.version != CONFIG_VERSION {
        return Err(Error::Schema {
            path: "version".into(),
            msg: format!("unsupported version {} (expected {CONFIG_VERSION})", cfg.version),
        });
    }
    Ok(cfg)
}

/// Training settings on their own, as accepted by `train --config`.
pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    parse_strict(text)
}

/// Encoder and flow hyperparameters used for the built-in models.
pub fn default_arch(model: &str) -> Result<ArchSpec> {
    let small = EncoderSpec {
        embedding: 8,
        heads: 2,
        inducing: 8,
        isabs: 2,
        pma_seeds: 1,
        sabs: 1,
        layer_norm: false,
    };
    match model.to_ascii_lowercase().as_str() {
        "gre" | "nc" => Ok(ArchSpec {
            encoder: small,
            flow: FlowSpec {
                affine: AffineKind::Triangular,
                maf_hidden: vec![32, 32, 32],
            },
        }),
        "gm" => Ok(ArchSpec {
            encoder: EncoderSpec {
                embedding: 16,
                heads: 4,
                ..small
            },
            flow: FlowSpec {
                affine: AffineKind::Diagonal,
                maf_hidden: vec![32],
            },
        }),
        _ => Err(Error::config(format!("unknown model `{model}` (expected nc, gre or gm)"))),
    }
}

/// Desk-scale training recipe for a built-in model.
pub fn default_train(model: &str) -> Result<TrainConfig> {
    let base = TrainConfig {
        dataset_size: 2000,
        minibatch: 32,
        theta_draws: 32,
        learning_rate: 1e-3,
        stages: vec![Stage::new(LossKind::ReverseKl, 10)],
        seed: 0,
    };
    match model.to_ascii_lowercase().as_str() {
        "gre" | "nc" => Ok(base),
        "gm" => Ok(TrainConfig {
            minibatch: 8,
            theta_draws: 8,
            stages: vec![
                Stage::new(LossKind::Map, 2),
                Stage::new(LossKind::UnregularizedElbo, 1),
                Stage::new(LossKind::ReverseKl, 2),
            ],
            ..base
        }),
        _ => Err(Error::config(format!("unknown model `{model}` (expected nc, gre or gm)"))),
    }
}

/// Full config of a built-in model.
pub fn zoo_config(model: &str) -> Result<ModelConfig> {
    Ok(ModelConfig {
        version: CONFIG_VERSION,
        template: zoo::by_name(model)?,
        arch: default_arch(model)?,
        train: default_train(model)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zoo_configs_round_trip() {
        for m in ["gre", "nc", "gm"] {
            let cfg = zoo_config(m).unwrap();
            let back = parse_config(&cfg.to_json()).unwrap();
            assert_eq!(back, cfg);
            back.validate().unwrap();
        }
    }

    #[test]
    fn unknown_key_reports_path() {
        let text = zoo_config("gre")
            .unwrap()
            .to_json()
            .replacen("\"heads\"", "\"headz\"", 1);
        match parse_config(&text) {
            Err(Error::Schema { path, msg }) => {
                assert_eq!(path, "arch.encoder.headz");
                assert!(msg.contains("headz"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn typo_in_distribution_kind_is_rejected() {
        let text = zoo_config("nc").unwrap().to_json().replacen("\"laplace\"", "\"laplce\"", 1);
        match parse_config(&text) {
            Err(Error::Schema { path, .. }) => assert!(path.starts_with("template.rvs[1]"), "{path}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn digest_ignores_training_settings() {
        let a = zoo_config("gre").unwrap();
        let mut b = a.clone();
        b.train.seed = 7;
        assert_eq!(a.digest(), b.digest());
        b.template.constants.insert("sigma_x".into(), 0.1);
        assert_ne!(a.digest(), b.digest());
    }
}
