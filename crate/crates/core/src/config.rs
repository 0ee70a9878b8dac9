//! The single JSON document that configures a run.
//!
//! Every field has a default, so `{}` is a complete config and reproduces
//! the stock hyperparameters. Unknown keys are rejected.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::{AnchorError, AnchorSpec, AttentionRegion};
use crate::model::ModelShape;
use crate::rpn::ProposalConfig;
use crate::synthdata::SceneConfig;
use crate::training::{init_params, LossConfig, OptimizerConfig, TrainConfig, Trainer};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// Parse failure; `field` is the dotted path where it happened.
    #[error("{field}: {message}")]
    Parse { field: String, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

impl ConfigError {
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Parse { field, .. } | ConfigError::Invalid { field, .. } => Some(field),
            ConfigError::Io { .. } => None,
        }
    }
}

/// Widths of the learnable stages. Anchor count and context come from the
/// proposal and `context` settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Widths {
    pub channels: usize,
    pub rpn_hidden: usize,
    pub pool_size: usize,
    pub detector_hidden: usize,
}

impl Default for Widths {
    fn default() -> Self {
        let s = ModelShape::default();
        Self {
            channels: s.channels,
            rpn_hidden: s.rpn_hidden,
            pool_size: s.pool_size,
            detector_hidden: s.detector_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: usize,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Append normalized proposal coordinates to the detector input.
    pub context: bool,
    pub top_n: usize,
    pub nms_threshold: f64,
    pub region: AttentionRegion,
    pub anchors: AnchorSpec,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub batch: TrainConfig,
    pub model: Widths,
    pub scene: SceneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = ProposalConfig::default();
        Self {
            seed: 0,
            steps: 5000,
            checkpoint_every: 1000,
            context: true,
            top_n: p.top_n,
            nms_threshold: p.nms_threshold,
            region: p.region,
            anchors: p.anchors,
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch: TrainConfig::default(),
            model: Widths::default(),
            scene: SceneConfig::default(),
        }
    }
}

/// Leading identifier of a validation message, used as the field name.
fn leading_field(msg: &str) -> &str {
    let end = msg
        .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '.'))
        .unwrap_or(msg.len());
    &msg[..end]
}

fn invalid(section: &str, msg: String) -> ConfigError {
    let f = leading_field(&msg);
    let field = if f.is_empty() {
        section.to_string()
    } else {
        format!("{section}.{f}")
    };
    ConfigError::Invalid { field, message: msg }
}

fn anchor_invalid(e: AnchorError) -> ConfigError {
    let field = match &e {
        AnchorError::EmptySpec | AnchorError::InvalidArea(_) => "anchors.areas".to_string(),
        AnchorError::InvalidRatio(_) => "anchors.ratios".to_string(),
        AnchorError::InvalidStride => "anchors.stride".to_string(),
        AnchorError::InvalidRegion { axis, .. } => format!("region.{axis}_min"),
        AnchorError::InvalidGrid(..) => "model".to_string(),
    };
    ConfigError::Invalid {
        field,
        message: e.to_string(),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::Parse {
                field: if path == "." { "(root)".into() } else { path },
                message: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.anchors.validate().map_err(anchor_invalid)?;
        self.region.validate().map_err(anchor_invalid)?;
        self.loss.validate().map_err(|m| invalid("loss", m))?;
        self.optimizer.validate().map_err(|m| invalid("optimizer", m))?;
        self.batch.validate().map_err(|m| invalid("batch", m))?;
        self.scene.validate().map_err(|m| invalid("scene", m))?;
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(ConfigError::Invalid {
                field: "nms_threshold".into(),
                message: format!("must lie in [0, 1], got {}", self.nms_threshold),
            });
        }
        if self.top_n == 0 {
            return Err(ConfigError::Invalid {
                field: "top_n".into(),
                message: "must be at least 1".into(),
            });
        }
        for (name, v) in [
            ("channels", self.model.channels),
            ("rpn_hidden", self.model.rpn_hidden),
            ("pool_size", self.model.pool_size),
            ("detector_hidden", self.model.detector_hidden),
        ] {
            if v == 0 {
                return Err(ConfigError::Invalid {
                    field: format!("model.{name}"),
                    message: "must be at least 1".into(),
                });
            }
        }
        Ok(())
    }

    pub fn proposal(&self) -> ProposalConfig {
        ProposalConfig {
            region: self.region,
            anchors: self.anchors.clone(),
            nms_threshold: self.nms_threshold,
            top_n: self.top_n,
        }
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            channels: self.model.channels,
            rpn_hidden: self.model.rpn_hidden,
            anchors_per_position: self.anchors.k(),
            pool_size: self.model.pool_size,
            detector_hidden: self.model.detector_hidden,
            context: self.context,
        }
    }

    /// Fresh parameters and a trainer, both driven by one RNG seeded with `seed`.
    pub fn trainer(&self) -> Trainer {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let params = init_params(&self.shape(), &mut rng, &self.optimizer);
        Trainer::new(params, self.proposal(), self.loss, self.optimizer, self.batch, rng)
    }

    /// The full-grid comparison run: identity region, six anchors, 300 proposals.
    pub fn baseline(&self) -> Self {
        let p = ProposalConfig::baseline();
        Self {
            region: p.region,
            anchors: p.anchors,
            top_n: p.top_n,
            nms_threshold: p.nms_threshold,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.loss.lambda, 10.0);
        assert_eq!(cfg.optimizer.momentum, 0.85);
        assert_eq!(cfg.top_n, 154);
        assert_eq!(cfg.shape().anchors_per_position, 4);
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_names_its_path() {
        let e = RunConfig::from_json(r#"{"loss": {"lamda": 3}}"#).unwrap_err();
        assert!(matches!(e, ConfigError::Parse { .. }));
        assert_eq!(e.field(), Some("loss.lamda"));
        let e = RunConfig::from_json(r#"{"scene": {"width": "wide"}}"#).unwrap_err();
        assert_eq!(e.field(), Some("scene.width"));
    }

    #[test]
    fn invalid_values_name_their_field() {
        let cases = [
            (r#"{"loss": {"lambda": -1}}"#, "loss.lambda"),
            (r#"{"loss": {"iou_pos": 0.2}}"#, "loss.iou_neg"),
            (r#"{"optimizer": {"momentum": 0}}"#, "optimizer.momentum"),
            (r#"{"batch": {"rpn_batch": 3}}"#, "batch.rpn_batch"),
            (r#"{"scene": {"noise_std": -0.1}}"#, "scene.noise_std"),
            (r#"{"anchors": {"areas": [], "ratios": [0.5], "stride": 16}}"#, "anchors.areas"),
            (r#"{"region": {"x_min": 0.9, "x_max": 0.1, "y_min": 0, "y_max": 1}}"#, "region.x_min"),
            (r#"{"nms_threshold": 2}"#, "nms_threshold"),
            (r#"{"model": {"channels": 0}}"#, "model.channels"),
        ];
        for (doc, field) in cases {
            let e = RunConfig::from_json(doc).unwrap_err();
            assert_eq!(e.field(), Some(field), "{doc}: {e}");
        }
    }

    #[test]
    fn baseline_swaps_only_the_proposal_stage() {
        let cfg = RunConfig {
            seed: 9,
            ..RunConfig::default()
        };
        let b = cfg.baseline();
        assert_eq!(b.seed, 9);
        assert_eq!(b.shape().anchors_per_position, 6);
        assert_eq!(b.proposal(), ProposalConfig::baseline());
    }
}
