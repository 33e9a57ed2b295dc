//! TOML mirrors of the core configuration types, used for checkpoint headers.

use pgs_core::config::{ArchConfig, PipelineConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{PgsError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSettings {
    pub mode: String,
    pub tiny_channels: usize,
    pub scales: Vec<usize>,
    pub heads: usize,
    pub head_dim: usize,
    pub predictor_hidden: usize,
    pub negative_slope: f64,
    pub loss_seed: u64,
}

impl From<&ArchConfig> for ArchSettings {
    fn from(a: &ArchConfig) -> Self {
        Self {
            mode: a.mode.to_string(),
            tiny_channels: a.tiny_channels,
            scales: a.scales.clone(),
            heads: a.heads,
            head_dim: a.head_dim,
            predictor_hidden: a.predictor_hidden,
            negative_slope: a.negative_slope,
            loss_seed: a.loss_seed,
        }
    }
}

impl TryFrom<&ArchSettings> for ArchConfig {
    type Error = PgsError;

    fn try_from(s: &ArchSettings) -> Result<Self> {
        let arch = ArchConfig {
            mode: s.mode.parse()?,
            tiny_channels: s.tiny_channels,
            scales: s.scales.clone(),
            heads: s.heads,
            head_dim: s.head_dim,
            predictor_hidden: s.predictor_hidden,
            negative_slope: s.negative_slope,
            loss_seed: s.loss_seed,
        };
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl From<&TrainConfig> for TrainSettings {
    fn from(t: &TrainConfig) -> Self {
        Self {
            iterations: t.iterations,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            lambda: t.lambda,
            seed: t.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSettings {
    pub k: usize,
    pub patch_side: usize,
    pub stride: usize,
    pub metric: String,
    pub aggregator: String,
    pub intra: bool,
    pub deformable: bool,
    pub refine: bool,
}

impl From<&PipelineConfig> for PipelineSettings {
    fn from(p: &PipelineConfig) -> Self {
        Self {
            k: p.k,
            patch_side: p.patch_side,
            stride: p.stride,
            metric: p.metric.to_string(),
            aggregator: p.aggregator.to_string(),
            intra: p.intra_enabled,
            deformable: p.deformable_enabled,
            refine: p.refine_enabled,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub parameter_version: u32,
    /// Optimizer steps taken before the checkpoint was written.
    pub iterations_done: usize,
}

/// Plain-text header stored with every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub checkpoint: CheckpointMeta,
    pub arch: ArchSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<PipelineSettings>,
}

impl Snapshot {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("snapshot serializes")
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_round_trip() {
        for arch in [ArchConfig::tiny(16), ArchConfig::full()] {
            let s = ArchSettings::from(&arch);
            assert_eq!(ArchConfig::try_from(&s).unwrap(), arch);
        }
        let bad = ArchSettings {
            mode: "huge".into(),
            ..ArchSettings::from(&ArchConfig::default())
        };
        assert!(ArchConfig::try_from(&bad).is_err());
    }

    #[test]
    fn snapshot_toml_round_trip() {
        let snap = Snapshot {
            checkpoint: CheckpointMeta {
                parameter_version: 1,
                iterations_done: 7,
            },
            arch: (&ArchConfig::default()).into(),
            train: Some((&TrainConfig::default()).into()),
            pipeline: Some((&PipelineConfig::default()).into()),
        };
        let text = snap.to_toml();
        assert!(text.contains("[arch]") && text.contains("mode = \"tiny\""));
        assert_eq!(Snapshot::from_toml(&text).unwrap(), snap);
        assert!(Snapshot::from_toml("[checkpoint]\nparameter_version = 1").is_err());
    }
}
