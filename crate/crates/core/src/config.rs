//! Run configuration, stored as TOML with one table per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetParams, MelConfig};
use crate::diffusion::{InsertionSet, ScheduleConfig, UNetConfig};
use crate::editing::InjectionConfig;
use crate::error::{Error, Result};
use crate::losses::{ContrastiveReduction, LossWeights, Similarity, TokenWeighting};
use crate::metrics::EmbedderConfig;
use crate::optim::AdamWParams;
use crate::projector::ProjectorConfig;
use crate::sampling::GuidanceConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub projector: ProjectorConfig,
    pub schedule: ScheduleConfig,
    /// Caption length in tokens.
    pub text_tokens: usize,
    pub adapter_ff_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            projector: ProjectorConfig::default(),
            schedule: ScheduleConfig::default(),
            text_tokens: 8,
            adapter_ff_mult: 2,
        }
    }
}

/// Text-conditioned pretraining of the backbone and caption embedder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing a caption with the null caption.
    pub text_dropout: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            steps: 900,
            batch: 16,
            lr: 1e-3,
            text_dropout: 0.1,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub enabled: bool,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub negatives: usize,
    pub alpha_contrastive: f64,
    pub alpha_mse: f64,
    pub weighting: TokenWeighting,
    pub similarity: Similarity,
    pub reduction: ContrastiveReduction,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            enabled: true,
            steps: 600,
            lr: 1e-4,
            batch: 6,
            negatives: 14,
            alpha_contrastive: w.alpha_contrastive,
            alpha_mse: w.alpha_mse,
            weighting: w.weighting,
            similarity: w.similarity,
            reduction: w.reduction,
            seed: 2,
        }
    }
}

impl Stage1Config {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha_contrastive: self.alpha_contrastive,
            alpha_mse: self.alpha_mse,
            weighting: self.weighting,
            similarity: self.similarity,
            reduction: self.reduction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub steps: usize,
    pub adapter_lr: f64,
    pub projector_lr: f64,
    /// Keep the projector trainable; when false it stays frozen at its stage-1 weights.
    pub train_projector: bool,
    pub batch: usize,
    pub null_dropout: f64,
    pub insertion_set: InsertionSet,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            steps: 2000,
            adapter_lr: 1e-3,
            projector_lr: 1e-5,
            train_projector: true,
            batch: 6,
            null_dropout: 0.1,
            insertion_set: InsertionSet::MiddleDecoder,
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Generated images per class.
    pub per_class: usize,
    pub seed: u64,
    /// Offset added to the dataset seed for the embedder's held-out split.
    pub embedder_seed_offset: u64,
    pub embedder: EmbedderConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            per_class: 8,
            seed: 4,
            embedder_seed_offset: 1000,
            embedder: EmbedderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DatasetParams,
    pub audio: AudioConfig,
    pub model: ModelConfig,
    pub backbone: BackboneConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub optim: OptimConfig,
    pub sampler: GuidanceConfig,
    pub editing: InjectionConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioConfig {
    pub mel: MelConfig,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            mel: MelConfig::default(),
        }
    }
}

/// Shared optimizer hyper-parameters; learning rates live with each stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let p = AdamWParams::default();
        Self {
            beta1: p.beta1,
            beta2: p.beta2,
            eps: p.eps,
            weight_decay: p.weight_decay,
        }
    }
}

impl OptimConfig {
    pub fn with_lr(&self, lr: f64) -> AdamWParams {
        AdamWParams {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, lr) in [
            ("backbone.lr", self.backbone.lr),
            ("stage1.lr", self.stage1.lr),
            ("stage2.adapter_lr", self.stage2.adapter_lr),
            ("stage2.projector_lr", self.stage2.projector_lr),
            ("eval.embedder.lr", self.eval.embedder.lr),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.stage2.projector_lr >= self.stage1.lr {
            return bad(format!(
                "stage2.projector_lr ({}) must be below stage1.lr ({})",
                self.stage2.projector_lr, self.stage1.lr
            ));
        }
        if self.stage1.alpha_contrastive < 0.0 || self.stage1.alpha_mse < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if let TokenWeighting::ReverseSigmoid { temperature } = self.stage1.weighting {
            if !(temperature > 0.0) {
                return bad("token-weight temperature must be positive".into());
            }
        }
        for (name, p) in [
            ("backbone.text_dropout", self.backbone.text_dropout),
            ("stage2.null_dropout", self.stage2.null_dropout),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.stage1.negatives == 0 {
            return bad("stage1.negatives must be at least 1".into());
        }
        if self.stage1.batch == 0 || self.stage2.batch == 0 || self.backbone.batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.model.projector.channels != self.model.unet.context_dim {
            return bad(format!(
                "projector channels ({}) must equal the text token width ({})",
                self.model.projector.channels, self.model.unet.context_dim
            ));
        }
        if self.model.unet.image_size != self.data.image_size {
            return bad("model.unet.image_size must equal data.image_size".into());
        }
        self.model.unet.validate()?;
        self.sampler.validate()?;
        self.editing.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(Error::io(path))
    }

    /// A much smaller configuration for smoke runs and tests.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.data.n_per_class = 8;
        c.backbone.steps = 4;
        c.backbone.batch = 4;
        c.stage1.steps = 4;
        c.stage1.negatives = 3;
        c.stage2.steps = 4;
        c.stage2.batch = 2;
        c.sampler.steps = 3;
        c.eval.per_class = 1;
        c.eval.embedder.steps = 5;
        c.eval.embedder.batch = 16;
        c
    }
}
