//! Architecture, inference and training settings.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// VGG-19 widths, weights loaded from a pretrained archive.
    Full,
    /// Narrow randomly initialized stack with the same downsampling structure.
    Tiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Ncc,
    Euclidean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Aggregator {
    #[default]
    Gat,
    Gcn,
    Gin,
    Sage,
    EdgeConv,
}

/// How predicted scale distributions turn into style nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Selection {
    /// Probability-weighted blend of every scale (training).
    Soft,
    /// Most probable scale only (inference).
    #[default]
    Hard,
}

macro_rules! text_enum {
    ($ty:ty, $what:literal, { $($text:literal => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($text => Ok($variant),)+
                    other => Err(Error::Parameter(format!(concat!("unknown ", $what, " `{}`"), other))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant { return f.write_str($text); })+
                unreachable!()
            }
        }
    };
}

text_enum!(Mode, "mode", { "full" => Mode::Full, "tiny" => Mode::Tiny });
text_enum!(Metric, "metric", { "ncc" => Metric::Ncc, "euclidean" => Metric::Euclidean });
text_enum!(Aggregator, "aggregator", {
    "gat" => Aggregator::Gat,
    "gcn" => Aggregator::Gcn,
    "gin" => Aggregator::Gin,
    "sage" => Aggregator::Sage,
    "edgeconv" => Aggregator::EdgeConv,
});
text_enum!(Selection, "selection", { "soft" => Selection::Soft, "hard" => Selection::Hard });

impl Aggregator {
    pub const ALL: [Aggregator; 5] = [
        Aggregator::Gat,
        Aggregator::Gcn,
        Aggregator::Gin,
        Aggregator::Sage,
        Aggregator::EdgeConv,
    ];
}

/// Shapes of every learnable component. Anything here changes parameter
/// shapes; everything in [`PipelineConfig`] can vary per inference call.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub mode: Mode,
    /// Feature channels at relu3_1 in tiny mode (multiple of 4).
    pub tiny_channels: usize,
    /// Candidate style patch sides, ascending odd integers.
    pub scales: Vec<usize>,
    pub heads: usize,
    pub head_dim: usize,
    pub predictor_hidden: usize,
    pub negative_slope: f64,
    /// Seed of the frozen tiny loss network.
    pub loss_seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Tiny,
            tiny_channels: 32,
            scales: vec![3, 5, 7],
            heads: 4,
            head_dim: 16,
            predictor_hidden: 32,
            negative_slope: 0.2,
            loss_seed: 0x5eed_1055,
        }
    }
}

impl ArchConfig {
    pub fn tiny(channels: usize) -> Self {
        Self {
            tiny_channels: channels,
            ..Self::default()
        }
    }

    pub fn full() -> Self {
        Self {
            mode: Mode::Full,
            head_dim: 64,
            predictor_hidden: 128,
            ..Self::default()
        }
    }

    /// Channel count of the encoder output.
    pub fn feature_channels(&self) -> usize {
        match self.mode {
            Mode::Full => 256,
            Mode::Tiny => self.tiny_channels,
        }
    }

    /// Side of the square training crop.
    pub fn crop_side(&self) -> usize {
        match self.mode {
            Mode::Full => 256,
            Mode::Tiny => 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == Mode::Tiny && (self.tiny_channels < 4 || !self.tiny_channels.is_multiple_of(4)) {
            return Err(Error::Config(format!(
                "tiny channel count must be a positive multiple of 4, got {}",
                self.tiny_channels
            )));
        }
        if self.scales.is_empty() {
            return Err(Error::Config(String::from("scale set must not be empty")));
        }
        if self.scales.iter().any(|s| s % 2 == 0) || self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "scales must be strictly ascending odd sides, got {:?}",
                self.scales
            )));
        }
        if self.heads == 0 || self.head_dim == 0 || self.predictor_hidden == 0 {
            return Err(Error::Config(String::from(
                "heads, head_dim and predictor_hidden must be positive",
            )));
        }
        if !(self.negative_slope > 0.0 && self.negative_slope < 1.0) {
            return Err(Error::Config(format!(
                "negative slope must be in (0, 1), got {}",
                self.negative_slope
            )));
        }
        Ok(())
    }
}

/// Per-call stylization switches.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub k: usize,
    pub patch_side: usize,
    pub stride: usize,
    pub metric: Metric,
    pub aggregator: Aggregator,
    pub intra_enabled: bool,
    pub deformable_enabled: bool,
    pub refine_enabled: bool,
    pub selection: Selection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 5,
            patch_side: 5,
            stride: 1,
            metric: Metric::Ncc,
            aggregator: Aggregator::Gat,
            intra_enabled: true,
            deformable_enabled: true,
            refine_enabled: true,
            selection: Selection::Hard,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.patch_side == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "k, patch side and stride must be positive (k={}, p={}, s={})",
                self.k, self.patch_side, self.stride
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 8,
            learning_rate: 1e-4,
            weight_decay: 5e-5,
            lambda: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config(String::from(
                "iterations and batch size must be positive",
            )));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.weight_decay < 0.0 || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "need lr > 0, weight decay >= 0, lambda >= 0 (got {}, {}, {})",
                self.learning_rate, self.weight_decay, self.lambda
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn defaults_follow_reference_settings() {
        let p = PipelineConfig::default();
        assert_eq!((p.k, p.patch_side, p.stride), (5, 5, 1));
        let t = TrainConfig::default();
        assert_eq!(t.batch_size, 8);
        assert_eq!(t.learning_rate, 1e-4);
        assert_eq!(t.weight_decay, 5e-5);
        assert_eq!(t.lambda, 10.0);
        assert_eq!(ArchConfig::default().scales, vec![3, 5, 7]);
    }

    #[test]
    fn enums_round_trip_text() {
        for a in Aggregator::ALL {
            assert_eq!(a.to_string().parse::<Aggregator>().unwrap(), a);
        }
        assert!("median".parse::<Aggregator>().is_err());
        assert_eq!("EUCLIDEAN".parse::<Metric>().unwrap(), Metric::Euclidean);
    }

    #[test]
    fn rejects_even_scales() {
        let mut a = ArchConfig {
            scales: vec![3, 4],
            ..ArchConfig::default()
        };
        assert!(a.validate().is_err());
        a.scales = vec![5, 3];
        assert!(a.validate().is_err());
    }
}
