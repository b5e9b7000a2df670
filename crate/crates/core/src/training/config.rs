use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SsipError};
use crate::fem::{BackboneExtractor, FeatureStoreBackbone, FemConfig, ToyBackbone, ToyBackboneConfig};
use crate::model::ModelMode;

/// Which frozen backbone feeds the feature extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    Toy(ToyBackboneConfig),
    /// Precomputed foundation-model features, one `.npy` per sample id.
    /// Without `feature_dir` the `SSIP_BACKBONE_DIR` variable is used.
    Foundation {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        feature_dir: Option<PathBuf>,
        layers: usize,
        dim: usize,
    },
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::Foundation {
            feature_dir: None,
            layers: 32,
            dim: 1280,
        }
    }
}

impl BackboneConfig {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            BackboneConfig::Toy(t) => (t.layers, t.dim),
            BackboneConfig::Foundation { layers, dim, .. } => (*layers, *dim),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn BackboneExtractor>> {
        Ok(match self {
            BackboneConfig::Toy(t) => Arc::new(ToyBackbone::new(t.clone())?),
            BackboneConfig::Foundation {
                feature_dir: Some(dir),
                layers,
                dim,
            } => Arc::new(FeatureStoreBackbone::new(dir, *layers, *dim)?),
            BackboneConfig::Foundation {
                feature_dir: None,
                layers,
                dim,
            } => Arc::new(FeatureStoreBackbone::from_env(*layers, *dim)?),
        })
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_epochs: usize,
    pub warmup_start_factor: f64,
    pub batch_size: usize,
    pub n_support: usize,
    /// Applied to unit-scale scores (targets divided by 100).
    pub huber_delta: f64,
    pub clip_gradients: bool,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Seed of the fixed validation episodes.
    pub eval_seed: u64,
    /// Training is single-threaded, so runs are always reproducible; the
    /// flag is recorded with the checkpoint.
    pub deterministic: bool,
    pub mode: ModelMode,
    pub model: FemConfig,
    pub backbone: BackboneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 3e-5,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            warmup_epochs: 10,
            warmup_start_factor: 0.1,
            batch_size: 128,
            n_support: 64,
            huber_delta: 1.0,
            clip_gradients: true,
            grad_clip_norm: 1.0,
            seed: 0,
            eval_seed: 0,
            deterministic: true,
            mode: ModelMode::Ssip,
            model: FemConfig::default(),
            backbone: BackboneConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small toy-backbone setup that trains in about a minute on one core.
    pub fn desk_scale() -> Self {
        let toy = ToyBackboneConfig::default();
        Self {
            epochs: 50,
            learning_rate: 2e-3,
            warmup_epochs: 5,
            batch_size: 32,
            n_support: 8,
            model: FemConfig {
                backbone_layers: toy.layers,
                backbone_dim: toy.dim,
                embed_dim: 16,
                heads: 4,
                ff_dim: 64,
                dropout: 0.0,
                ..FemConfig::default()
            },
            backbone: BackboneConfig::Toy(toy),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(SsipError::Config(msg));
        if self.epochs == 0 || self.epochs < self.warmup_epochs {
            return fail(format!(
                "epochs ({}) must be positive and at least warmup_epochs ({})",
                self.epochs, self.warmup_epochs
            ));
        }
        if self.n_support == 0 || self.n_support >= self.batch_size {
            return fail(format!(
                "need 1 <= n_support ({}) < batch_size ({})",
                self.n_support, self.batch_size
            ));
        }
        if !(self.huber_delta > 0.0) {
            return fail(format!("huber_delta must be positive, got {}", self.huber_delta));
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) {
            return fail("learning_rate and adam_eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        if !(self.warmup_start_factor > 0.0 && self.warmup_start_factor <= 1.0) {
            return fail("warmup_start_factor must lie in (0, 1]".into());
        }
        if self.clip_gradients && !(self.grad_clip_norm > 0.0) {
            return fail("grad_clip_norm must be positive".into());
        }
        let (layers, dim) = self.backbone.shape();
        if (layers, dim) != (self.model.backbone_layers, self.model.backbone_dim) {
            return fail(format!(
                "backbone produces {layers} x {dim} features, model expects {} x {}",
                self.model.backbone_layers, self.model.backbone_dim
            ));
        }
        self.model.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| SsipError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SsipError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SsipError::io(path, e))?;
        Self::from_toml(&text)
    }
}
