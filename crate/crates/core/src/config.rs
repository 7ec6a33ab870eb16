//! Model dimensions and engine (inference/training policy) settings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture dimensions. Stored in checkpoint metadata so that a
/// checkpoint fully determines the network it belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Shared feature width `C` (ViT tokens, fused pyramid, queries).
    pub channels: usize,
    pub patch: usize,
    pub vit_depth: usize,
    pub vit_heads: usize,
    pub mlp_ratio: usize,
    /// Patch grid of the learned positional table (base resolution / patch).
    pub pos_grid: usize,
    /// Channels of the stride-4/8/16 CNN levels.
    pub pyramid_channels: [usize; 3],
    pub stem_channels: usize,
    pub deform_heads: usize,
    pub deform_points: usize,
    pub fusion_depth: usize,
    pub query_count: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub decoder_channels: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 64,
            patch: 8,
            vit_depth: 4,
            vit_heads: 2,
            mlp_ratio: 4,
            pos_grid: 16,
            pyramid_channels: [32, 64, 128],
            stem_channels: 16,
            deform_heads: 2,
            deform_points: 4,
            fusion_depth: 1,
            query_count: 8,
            key_dim: 16,
            value_dim: 16,
            decoder_channels: [32, 16],
        }
    }
}

impl ModelConfig {
    /// A very small network for gradient checks and unit tests.
    pub fn tiny() -> Self {
        ModelConfig {
            channels: 8,
            patch: 4,
            vit_depth: 1,
            vit_heads: 2,
            mlp_ratio: 2,
            pos_grid: 4,
            pyramid_channels: [4, 6, 8],
            stem_channels: 3,
            deform_heads: 2,
            deform_points: 2,
            fusion_depth: 1,
            query_count: 3,
            key_dim: 4,
            value_dim: 4,
            decoder_channels: [4, 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.channels == 0 || self.patch == 0 || self.query_count == 0 {
            return bad("channels, patch and query_count must be positive");
        }
        if !self.channels.is_multiple_of(self.vit_heads)
            || !self.channels.is_multiple_of(self.deform_heads)
        {
            return bad("channels must divide evenly across attention heads");
        }
        if self.fusion_depth == 0 {
            return bad("fusion_depth must be at least 1");
        }
        Ok(())
    }
}

/// Inference and training policy knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub memory_interval: usize,
    pub memory_capacity: usize,
    pub scales: Vec<f64>,
    pub flip_fusion: bool,
    pub base_size: usize,
    pub seed: u64,
    pub freeze_vit: bool,
    pub query_count: usize,
    pub channels: usize,
    /// Enables the discriminative additive query update on memory frames.
    pub query_update: bool,
    /// Salient matches below this cosine similarity are dropped before the
    /// update. `None` keeps every match.
    pub similarity_threshold: Option<f64>,
    /// Architecture override; `None` derives it from `channels`,
    /// `query_count` and `base_size`.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
}

/// Optimizer and clip sampling settings for `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub frames_per_clip: usize,
    pub train_frames: usize,
    pub max_targets: usize,
    pub points_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.02,
            momentum: 0.9,
            clip_norm: Some(1.0),
            frames_per_clip: 8,
            train_frames: 3,
            max_targets: 3,
            points_k: 256,
        }
    }
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            memory_interval: 3,
            memory_capacity: 8,
            scales: vec![1.0, 1.5],
            flip_fusion: true,
            base_size: 128,
            seed: 0,
            freeze_vit: false,
            query_count: 8,
            channels: 64,
            query_update: true,
            similarity_threshold: None,
            model: None,
            train: TrainConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("scales must be nonempty and positive".into()));
        }
        if self.memory_interval == 0 {
            return Err(Error::Config("memory_interval must be at least 1".into()));
        }
        if self.memory_capacity == 0 {
            return Err(Error::Config("memory_capacity must be at least 1".into()));
        }
        if self.base_size < 16 {
            return Err(Error::Config("base_size must be at least 16".into()));
        }
        let t = &self.train;
        if t.frames_per_clip < 2 || t.train_frames == 0 || t.train_frames >= t.frames_per_clip {
            return Err(Error::Config(
                "a clip needs a reference frame plus at least one supervised frame".into(),
            ));
        }
        if t.max_targets == 0 || t.points_k == 0 || !(t.lr >= 0.0) {
            return Err(Error::Config(
                "max_targets, points_k must be positive and lr non-negative".into(),
            ));
        }
        self.model_config().validate()
    }

    /// Default architecture with this config's width and query count.
    pub fn model_config(&self) -> ModelConfig {
        if let Some(m) = &self.model {
            return m.clone();
        }
        ModelConfig {
            channels: self.channels,
            query_count: self.query_count,
            pos_grid: (self.base_size / ModelConfig::default().patch).max(1),
            ..ModelConfig::default()
        }
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: EngineConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
