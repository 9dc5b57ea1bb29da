//! The run configuration file shared by every training command.

use std::path::{Path, PathBuf};

use curvebert::trainer::{GridSpec, Phase, TrainSpec};
use curvebert::{AdamConfig, ModelConfig, TaskVariant};
use serde::{Deserialize, Serialize};

use crate::Invalid;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub data: DataSection,
    pub model: ModelConfig,
    pub pretrain: PretrainSection,
    pub finetune: LoopSection,
    pub report: ReportSection,
    pub grid: GridSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Labeled dataset CSV.
    pub dataset: Option<PathBuf>,
    pub test_rate: f64,
    /// Split seed. Run seeds live in the loop sections.
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dataset: None,
            test_rate: 0.2,
            seed: 0,
        }
    }
}

/// Loop overrides; anything left out keeps the phase default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopSection {
    pub batch_size: Option<usize>,
    pub max_epoch: Option<usize>,
    pub patience: Option<usize>,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub mask_probability: Option<f64>,
}

impl LoopSection {
    pub fn spec(&self, phase: Phase) -> TrainSpec {
        let base = match phase {
            Phase::Pretrain => TrainSpec::pretraining(),
            Phase::Finetune => TrainSpec::finetuning(),
        };
        TrainSpec {
            phase,
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            max_epoch: self.max_epoch.unwrap_or(base.max_epoch),
            patience: self.patience.unwrap_or(base.patience),
            seed: self.seed.unwrap_or(base.seed),
            adam: AdamConfig {
                lr: self.lr.unwrap_or(base.adam.lr),
                weight_decay: self.weight_decay.unwrap_or(base.adam.weight_decay),
                beta1: self.beta1.unwrap_or(base.adam.beta1),
                beta2: self.beta2.unwrap_or(base.adam.beta2),
                epsilon: self.epsilon.unwrap_or(base.adam.epsilon),
            },
            mask_probability: self.mask_probability.unwrap_or(base.mask_probability),
        }
    }

    fn from_spec(spec: &TrainSpec) -> Self {
        Self {
            batch_size: Some(spec.batch_size),
            max_epoch: Some(spec.max_epoch),
            patience: Some(spec.patience),
            seed: Some(spec.seed),
            lr: Some(spec.adam.lr),
            weight_decay: Some(spec.adam.weight_decay),
            beta1: Some(spec.adam.beta1),
            beta2: Some(spec.adam.beta2),
            epsilon: Some(spec.adam.epsilon),
            mask_probability: Some(spec.mask_probability),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    /// Replaces `model.task_variant` when set.
    pub variant: Option<TaskVariant>,
    pub batch_size: Option<usize>,
    pub max_epoch: Option<usize>,
    pub patience: Option<usize>,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub mask_probability: Option<f64>,
}

impl PretrainSection {
    fn as_loop(&self) -> LoopSection {
        LoopSection {
            batch_size: self.batch_size,
            max_epoch: self.max_epoch,
            patience: self.patience,
            seed: self.seed,
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            mask_probability: self.mask_probability,
        }
    }

    fn from_loop(variant: TaskVariant, l: LoopSection) -> Self {
        Self {
            variant: Some(variant),
            batch_size: l.batch_size,
            max_epoch: l.max_epoch,
            patience: l.patience,
            seed: l.seed,
            lr: l.lr,
            weight_decay: l.weight_decay,
            beta1: l.beta1,
            beta2: l.beta2,
            epsilon: l.epsilon,
            mask_probability: l.mask_probability,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// Output directory; falls back to `$CURVEBERT_OUT`, then `runs`.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub layers: Vec<usize>,
    pub heads: Vec<usize>,
    pub hidden: Vec<usize>,
    pub token_size: Vec<usize>,
    /// Pre-train each combination with the `[pretrain]` settings first.
    pub pretrain: bool,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = GridSpec::default();
        Self {
            layers: g.layers,
            heads: g.heads,
            hidden: g.hidden,
            token_size: g.token_size,
            pretrain: false,
        }
    }
}

impl GridSection {
    pub fn spec(&self) -> GridSpec {
        GridSpec {
            layers: self.layers.clone(),
            heads: self.heads.clone(),
            hidden: self.hidden.clone(),
            token_size: self.token_size.clone(),
        }
    }
}

impl RunConfigFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self, Invalid> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            Invalid(format!("{}: line {line}: {}", path.display(), e.message()))
        })?;
        if let Some(v) = cfg.pretrain.variant {
            cfg.model.task_variant = v;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Invalid> {
        let text = std::fs::read_to_string(path).map_err(|e| Invalid(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn pretrain_spec(&self) -> TrainSpec {
        self.pretrain.as_loop().spec(Phase::Pretrain)
    }

    pub fn finetune_spec(&self) -> TrainSpec {
        self.finetune.spec(Phase::Finetune)
    }

    /// Applies a `--seed` override to both training loops.
    pub fn override_seed(&mut self, seed: u64) {
        self.pretrain.seed = Some(seed);
        self.finetune.seed = Some(seed);
    }

    /// Every default made explicit.
    pub fn resolved(&self) -> Self {
        Self {
            pretrain: PretrainSection::from_loop(
                self.model.task_variant,
                LoopSection::from_spec(&self.pretrain_spec()),
            ),
            finetune: LoopSection::from_spec(&self.finetune_spec()),
            ..self.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
