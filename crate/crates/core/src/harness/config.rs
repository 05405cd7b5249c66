//! Run configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::TemporalSchedule;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Supervised,
    MaskahandPretrain,
    ZeroShotEval,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            lr: 3e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionMode {
    F64,
    Mixed16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Precision {
    pub train: PrecisionMode,
    pub verify: PrecisionMode,
}

impl Default for Precision {
    fn default() -> Self {
        Self {
            train: PrecisionMode::F64,
            verify: PrecisionMode::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub iterations: usize,
    /// When set, overrides `iterations` with `ceil(epochs · n / batch_size)`.
    pub epochs: Option<usize>,
    pub backbone_lr_factor: f64,
    pub spatial_size: usize,
    pub max_frames: usize,
    pub channels: usize,
    pub heads: usize,
    pub precision: Precision,
    pub seed: u64,
    pub mode: RunMode,
    pub deterministic: bool,
    pub levels: Vec<u32>,
    pub trunk_channels: usize,
    pub video_level: u32,
    pub temporal_schedule: TemporalSchedule,
    pub multi_scale: bool,
    /// Action classes for supervised runs; ignored when pretraining.
    pub action_classes: Option<usize>,
    /// Resolution the heatmap loss is computed at; `None` is native.
    pub supervise_at: Option<[usize; 2]>,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            schedule: Schedule::Cosine,
            batch_size: 16,
            iterations: 5000,
            epochs: None,
            backbone_lr_factor: 0.1,
            spatial_size: 256,
            max_frames: 64,
            channels: 256,
            heads: 4,
            precision: Precision::default(),
            seed: 0,
            mode: RunMode::Supervised,
            deterministic: true,
            levels: vec![2, 3, 4, 5],
            trunk_channels: 32,
            video_level: 3,
            temporal_schedule: TemporalSchedule::Halving,
            multi_scale: true,
            action_classes: None,
            supervise_at: None,
            log_every: 50,
        }
    }
}

impl RunConfig {
    /// Desk-scale run: 32² inputs, 16 channels, 4 frames, levels {2, 3}.
    pub fn tiny() -> Self {
        Self {
            iterations: 200,
            spatial_size: 32,
            max_frames: 4,
            channels: 16,
            heads: 1,
            levels: vec![2, 3],
            trunk_channels: 16,
            optimizer: OptimizerConfig {
                lr: 3e-3,
                ..OptimizerConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::format(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::format(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("spatial_size", self.spatial_size),
            ("max_frames", self.max_frames),
            ("channels", self.channels),
            ("heads", self.heads),
            ("trunk_channels", self.trunk_channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.iterations == 0 && self.epochs.is_none() {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if !(self.optimizer.lr >= 0.0) || !(self.optimizer.weight_decay >= 0.0) || !(self.backbone_lr_factor >= 0.0) {
            return Err(Error::Config("learning rate, weight decay and backbone factor must be nonnegative".into()));
        }
        let expected = (self.channels / 64).max(1);
        if self.heads != expected {
            return Err(Error::Config(format!(
                "heads must be channels/64 (at least 1): expected {expected} for {} channels, got {}",
                self.channels, self.heads
            )));
        }
        self.model_config(None).validate()
    }

    pub fn iterations_for(&self, dataset_len: usize) -> usize {
        match self.epochs {
            Some(e) => (e * dataset_len).div_ceil(self.batch_size).max(1),
            None => self.iterations,
        }
    }

    /// Model configuration; `action_classes` overrides the config's value
    /// (pretraining passes `None` explicitly through [`RunConfig::mode`]).
    pub fn model_config(&self, action_classes: Option<usize>) -> ModelConfig {
        let mut m = ModelConfig {
            image_size: (self.spatial_size, self.spatial_size),
            video_size: (self.spatial_size, self.spatial_size),
            max_frames: self.max_frames,
            multi_scale: self.multi_scale,
            ..ModelConfig::default()
        };
        m.encoder.channels = self.channels;
        m.encoder.levels = self.levels.clone();
        m.encoder.trunk_channels = self.trunk_channels;
        m.decoder.heads = Some(self.heads);
        m.decoder.temporal.video_level = self.video_level;
        m.decoder.temporal.schedule = self.temporal_schedule;
        m.heads.action_classes = match self.mode {
            RunMode::MaskahandPretrain => None,
            _ => action_classes.or(self.action_classes),
        };
        m
    }

    pub fn supervision_resolution(&self) -> Option<(usize, usize)> {
        self.supervise_at.map(|[h, w]| (h, w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip() {
        let cfg = RunConfig::tiny();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg: RunConfig = toml::from_str("iterations = 10\n[optimizer]\nlr = 0.001\n").unwrap();
        assert_eq!(cfg.iterations, 10);
        assert_eq!(cfg.optimizer.lr, 0.001);
        assert_eq!(cfg.optimizer.weight_decay, 0.05);
        assert_eq!(cfg.batch_size, 16);
    }

    #[test]
    fn heads_follow_channels() {
        assert!(RunConfig::default().validate().is_ok());
        let bad = RunConfig {
            heads: 8,
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
