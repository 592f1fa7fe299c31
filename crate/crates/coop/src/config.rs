//! Experiment configuration: one TOML file drives scene synthesis, model
//! shape, training schedule, communication budget, and evaluation.

use crate::pillars::GridSpec;
use crate::querygen::QueryGenSpec;
use crate::scene::{PoseNoiseSpec, SceneSpec};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Scene synthesis settings plus the pose noise applied to helper agents.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SceneConfig {
    pub spec: SceneSpec,
    pub pose_noise: PoseNoiseSpec,
}

/// Model shape: detection range/grid, feature widths, attention layout.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// queries per agent
    pub n_q: usize,
    /// query feature channels
    pub c_q: usize,
    /// BEV feature channels
    pub c_bev: usize,
    /// attention heads in the decoder and the aggregation stage
    pub heads: usize,
    /// sampling points per head per level
    pub points: usize,
    /// pyramid levels
    pub levels: usize,
    /// decoder layers
    pub depth: usize,
    /// sinusoidal frequency bands in the positional embedding
    pub pe_freqs: usize,
    /// iterative reference refinement in the decoder
    pub refine_refs: bool,
    /// similarity threshold for cross-agent query matching
    pub mu: f32,
    /// detection range and pillar size
    pub x_min: f32,
    pub x_max: f32,
    pub y_min: f32,
    pub y_max: f32,
    pub z_min: f32,
    pub z_max: f32,
    pub pillar: f32,
    /// per-pillar point cap
    pub max_points_per_pillar: usize,
}

impl ModelConfig {
    /// Same learned-parameter shapes; `mu` is a runtime threshold and may
    /// differ between a checkpoint and the evaluation config.
    pub fn shape_eq(&self, other: &ModelConfig) -> bool {
        let a = ModelConfig { mu: 0.0, ..self.clone() };
        let b = ModelConfig { mu: 0.0, ..other.clone() };
        a == b
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            x_min: self.x_min,
            x_max: self.x_max,
            y_min: self.y_min,
            y_max: self.y_max,
            z_min: self.z_min,
            z_max: self.z_max,
            pillar: self.pillar,
        }
    }

    pub fn query_spec(&self) -> QueryGenSpec {
        QueryGenSpec {
            n_q: self.n_q,
            c_q: self.c_q,
            c_bev: self.c_bev,
            heads: self.heads,
            points: self.points,
            levels: self.levels,
            depth: self.depth,
            pe_freqs: self.pe_freqs,
            refine_refs: self.refine_refs,
            grid: self.grid(),
        }
    }
}

/// Optimizer and schedule: AdamW with linear warm-up into cosine annealing.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainingConfig {
    pub epochs: usize,
    /// distinct training scenes; each contributes one optimizer step per epoch
    pub scenes: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub warmup_epochs: usize,
    /// weight of per-agent auxiliary losses next to the fused ego loss
    pub aux_weight: f32,
    pub lambda_cls: f32,
    pub lambda_box: f32,
}

/// Per-frame communication budget in bytes; absent means unlimited.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct CommsConfig {
    pub budget_bytes: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalConfig {
    pub scenes: usize,
    pub iou_thresholds: Vec<f32>,
    /// detections below this confidence are dropped before scoring
    pub score_floor: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub comms: CommsConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_path(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scene
            .spec
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("scene: {e}")))?;
        self.scene
            .pose_noise
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("pose noise: {e}")))?;
        self.model
            .query_spec()
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("model: {e}")))?;
        if self.model.max_points_per_pillar == 0 {
            return Err(ConfigError::Invalid("max_points_per_pillar must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.model.mu) {
            return Err(ConfigError::Invalid(format!(
                "mu {} outside [0, 1]",
                self.model.mu
            )));
        }
        let t = &self.training;
        if t.epochs == 0 || t.scenes == 0 {
            return Err(ConfigError::Invalid("epochs and scenes must be positive".into()));
        }
        if t.warmup_epochs > t.epochs {
            return Err(ConfigError::Invalid(format!(
                "warmup_epochs {} exceeds epochs {}",
                t.warmup_epochs, t.epochs
            )));
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(ConfigError::Invalid(format!("lr {} must be finite and >= 0", t.lr)));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(ConfigError::Invalid("weight_decay must be finite and >= 0".into()));
        }
        if t.aux_weight < 0.0 || t.lambda_cls < 0.0 || t.lambda_box < 0.0 {
            return Err(ConfigError::Invalid("loss weights must be >= 0".into()));
        }
        if self.model.n_q < self.scene.spec.num_objects {
            return Err(ConfigError::Invalid(format!(
                "n_q {} cannot cover {} objects (set matching needs predictions >= targets)",
                self.model.n_q, self.scene.spec.num_objects
            )));
        }
        if self.eval.scenes == 0 {
            return Err(ConfigError::Invalid("eval.scenes must be positive".into()));
        }
        if self.eval.iou_thresholds.is_empty()
            || self
                .eval
                .iou_thresholds
                .iter()
                .any(|t| !(*t > 0.0 && *t < 1.0))
        {
            return Err(ConfigError::Invalid(
                "eval.iou_thresholds must be non-empty values in (0, 1)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.eval.score_floor) {
            return Err(ConfigError::Invalid(format!(
                "score_floor {} outside [0, 1)",
                self.eval.score_floor
            )));
        }
        Ok(())
    }

    /// CPU-friendly reference configuration: 64x64 BEV grid, 3 agents, a
    /// ~22-minute single-core training schedule. Unit tests shrink the model
    /// and schedule from this seed config; the occlusion-suite benchmarks run
    /// it as-is.
    pub fn desk_default() -> Self {
        ExperimentConfig {
            seed: 7,
            scene: SceneConfig {
                spec: SceneSpec {
                    num_agents: 3,
                    num_objects: 6,
                    x_half: 14.0,
                    y_half: 14.0,
                    z_min: -0.5,
                    z_max: 2.5,
                    occluded_objects: 3,
                    min_points: 6,
                    rays_per_agent: 720,
                    z_samples_per_hit: 5,
                    sensor_sigma: 0.02,
                    retry_limit: 64,
                },
                pose_noise: PoseNoiseSpec::none(),
            },
            model: ModelConfig {
                n_q: 16,
                c_q: 32,
                c_bev: 16,
                heads: 4,
                points: 4,
                levels: 3,
                depth: 2,
                pe_freqs: 6,
                refine_refs: true,
                mu: 0.58,
                x_min: -14.4,
                x_max: 14.4,
                y_min: -14.4,
                y_max: 14.4,
                z_min: -0.5,
                z_max: 2.5,
                pillar: 0.45,
                max_points_per_pillar: 16,
            },
            training: TrainingConfig {
                epochs: 28,
                scenes: 220,
                lr: 2e-3,
                weight_decay: 1e-2,
                warmup_epochs: 2,
                aux_weight: 1.0,
                lambda_cls: 2.0,
                lambda_box: 0.25,
            },
            comms: CommsConfig { budget_bytes: None },
            eval: EvalConfig {
                scenes: 40,
                iou_thresholds: vec![0.3, 0.5, 0.7],
                score_floor: 0.05,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_validates() {
        ExperimentConfig::desk_default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_preserves_config() {
        let cfg = ExperimentConfig::desk_default();
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = ExperimentConfig::desk_default();
        cfg.model.mu = 1.5;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::desk_default();
        cfg.training.warmup_epochs = 99;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::desk_default();
        cfg.training.lr = f32::NAN;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::desk_default();
        cfg.eval.iou_thresholds = vec![];
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::desk_default();
        cfg.model.heads = 3; // does not divide c_q
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn garbage_toml_is_a_parse_error() {
        assert!(matches!(
            ExperimentConfig::from_toml_str("not = [valid"),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn missing_budget_means_unlimited() {
        let cfg = ExperimentConfig::desk_default();
        let text = cfg.to_toml_string();
        assert!(ExperimentConfig::from_toml_str(&text)
            .unwrap()
            .comms
            .budget_bytes
            .is_none());
    }
}
