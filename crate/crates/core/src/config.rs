//! Experiment configuration: one JSON document tying together dataset
//! geometry, the click environment, model widths, and the training
//! schedule.

use crate::critic::CriticConfig;
use crate::dataset::{DatasetError, DatasetParams};
use crate::env::{EnvError, EnvironmentSpec};
use crate::policy::{CellKind, PolicyConfig};
use crate::trainer::{TrainConfig, TrainerError};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("candidate pool {candidates} is smaller than the {tiles}-tile grid")]
    PoolSmallerThanGrid { candidates: usize, tiles: usize },
    #[error("{what} must be at least 1")]
    ZeroWidth { what: &'static str },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Train(Box<TrainerError>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<TrainerError> for ConfigError {
    fn from(e: TrainerError) -> Self {
        ConfigError::Train(Box::new(e))
    }
}

impl From<serde_json::Error> for ConfigError {
    fn from(e: serde_json::Error) -> Self {
        ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

fn default_attention_width() -> usize {
    128
}

fn default_decoder_hidden() -> usize {
    64
}

fn default_head_dim() -> usize {
    64
}

fn default_cell() -> CellKind {
    CellKind::Lstm
}

/// Policy widths; the input width comes from the dataset's feature widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyHyper {
    #[serde(default = "default_attention_width")]
    pub d_k: usize,
    #[serde(default = "default_attention_width")]
    pub d_v: usize,
    #[serde(default = "default_decoder_hidden")]
    pub decoder_hidden: usize,
    #[serde(default = "default_head_dim")]
    pub head_dim: usize,
    #[serde(default = "default_cell")]
    pub cell: CellKind,
}

impl Default for PolicyHyper {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults fill an empty object")
    }
}

fn default_positionwise_width() -> usize {
    16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticHyper {
    #[serde(default = "default_attention_width")]
    pub d_k: usize,
    #[serde(default = "default_attention_width")]
    pub d_v: usize,
    #[serde(default = "default_positionwise_width")]
    pub positionwise_width: usize,
}

impl Default for CriticHyper {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults fill an empty object")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    #[serde(default)]
    pub policy: PolicyHyper,
    #[serde(default)]
    pub critic: CriticHyper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetParams,
    pub environment: EnvironmentSpec,
    #[serde(default)]
    pub model: ModelParams,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.dataset.validate()?;
        if self.dataset.candidates < self.dataset.grid.k() {
            return Err(ConfigError::PoolSmallerThanGrid {
                candidates: self.dataset.candidates,
                tiles: self.dataset.grid.k(),
            });
        }
        self.environment.validate()?;
        self.train.validate()?;
        let m = &self.model;
        for (what, value) in [
            ("policy d_k", m.policy.d_k),
            ("policy d_v", m.policy.d_v),
            ("policy decoder width", m.policy.decoder_hidden),
            ("policy pointer-head width", m.policy.head_dim),
            ("critic d_k", m.critic.d_k),
            ("critic d_v", m.critic.d_v),
            ("critic position-wise width", m.critic.positionwise_width),
        ] {
            if value == 0 {
                return Err(ConfigError::ZeroWidth { what });
            }
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.dataset.user_width + self.dataset.item_width
    }

    pub fn policy_config(&self) -> PolicyConfig {
        let h = self.model.policy;
        PolicyConfig {
            input_width: self.input_width(),
            d_k: h.d_k,
            d_v: h.d_v,
            decoder_hidden: h.decoder_hidden,
            head_dim: h.head_dim,
            cell: h.cell,
        }
    }

    pub fn critic_config(&self) -> CriticConfig {
        let h = self.model.critic;
        CriticConfig {
            input_width: self.input_width(),
            tiles: self.dataset.grid.k(),
            d_k: h.d_k,
            d_v: h.d_v,
            positionwise_width: h.positionwise_width,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::page::Grid;

    fn minimal_json() -> String {
        r#"{
            "dataset": {
                "users": 20, "items": 200, "user_width": 8, "item_width": 8,
                "pages": 300, "candidates": 50,
                "grid": {"rows": 5, "cols": 6}
            },
            "environment": {
                "scan": {"kind": "row"}, "eta": 0.05, "dynamics": "none",
                "similarity_quantile": 0.005, "preference_seed": 7,
                "reward": "clicks", "mode": "stochastic"
            },
            "train": {"steps": 100, "batch_size": 16, "seed": 3},
            "output_dir": "runs/demo"
        }"#
        .to_string()
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let config = ExperimentConfig::from_json(&minimal_json()).unwrap();
        assert_eq!(config.input_width(), 16);
        let p = config.policy_config();
        assert_eq!((p.d_k, p.d_v, p.decoder_hidden, p.head_dim), (128, 128, 64, 64));
        assert_eq!(p.cell, CellKind::Lstm);
        let c = config.critic_config();
        assert_eq!((c.d_k, c.d_v, c.positionwise_width), (128, 128, 16));
        assert_eq!(c.tiles, 30);
        assert_eq!(config.train.entropy_weight, 0.0);
        assert!(!config.train.normalize_advantages);
        assert_eq!(config.train.policy_adam.learning_rate, 0.001);
    }

    #[test]
    fn parse_errors_carry_line_and_column() {
        let broken = minimal_json().replace("\"steps\": 100", "\"steps\": \"many\"");
        match ExperimentConfig::from_json(&broken).unwrap_err() {
            ConfigError::Parse { line, column, message } => {
                assert!(line > 1, "line {line}");
                assert!(column > 0);
                assert!(message.contains("invalid type"), "{message}");
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let extra = minimal_json().replace("\"output_dir\"", "\"outpt_dir\": 1, \"output_dir\"");
        assert!(matches!(
            ExperimentConfig::from_json(&extra).unwrap_err(),
            ConfigError::Parse { .. }
        ));
    }

    #[test]
    fn pool_must_cover_the_grid() {
        let shrunk = minimal_json().replace("\"candidates\": 50", "\"candidates\": 20");
        assert!(matches!(
            ExperimentConfig::from_json(&shrunk).unwrap_err(),
            ConfigError::PoolSmallerThanGrid {
                candidates: 20,
                tiles: 30
            }
        ));
    }

    #[test]
    fn nested_validation_runs() {
        let bad_eta = minimal_json().replace("\"eta\": 0.05", "\"eta\": -1.0");
        assert!(matches!(
            ExperimentConfig::from_json(&bad_eta).unwrap_err(),
            ConfigError::Env(_)
        ));
        let bad_batch = minimal_json().replace("\"batch_size\": 16", "\"batch_size\": 0");
        assert!(matches!(
            ExperimentConfig::from_json(&bad_batch).unwrap_err(),
            ConfigError::Train(_)
        ));
    }

    #[test]
    fn round_trips_through_json() {
        let config = ExperimentConfig::from_json(&minimal_json()).unwrap();
        let again = ExperimentConfig::from_json(&config.to_json()).unwrap();
        assert_eq!(config, again);
        assert_eq!(config.dataset.grid, Grid::new(5, 6).unwrap());
    }
}
