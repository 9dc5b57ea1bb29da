use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pre-training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskVariant {
    /// Pair input; same-class prediction from `[CLS]` plus masked reconstruction.
    #[serde(rename = "NCP-CLS")]
    NcpCls,
    /// Pair input; same-class prediction from `[CLS]` and every content token.
    #[serde(rename = "NCP-All")]
    NcpAll,
    /// Pair input; masked reconstruction only.
    #[serde(rename = "NCP-Null")]
    NcpNull,
    /// Single-curve input; masked reconstruction only.
    #[serde(rename = "NCP-OMCM")]
    NcpOmcm,
}

impl TaskVariant {
    pub const ALL: [TaskVariant; 4] = [Self::NcpCls, Self::NcpAll, Self::NcpNull, Self::NcpOmcm];

    /// Whether the variant consumes curve pairs.
    pub fn uses_pairs(self) -> bool {
        !matches!(self, Self::NcpOmcm)
    }

    /// Whether the variant trains a same-class classifier.
    pub fn has_pair_head(self) -> bool {
        matches!(self, Self::NcpCls | Self::NcpAll)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::NcpCls => "NCP-CLS",
            Self::NcpAll => "NCP-All",
            Self::NcpNull => "NCP-Null",
            Self::NcpOmcm => "NCP-OMCM",
        }
    }
}

impl fmt::Display for TaskVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('_', "-");
        let norm = norm.strip_prefix("NCP-").unwrap_or(&norm);
        match norm {
            "CLS" => Ok(Self::NcpCls),
            "ALL" => Ok(Self::NcpAll),
            "NULL" => Ok(Self::NcpNull),
            "OMCM" => Ok(Self::NcpOmcm),
            _ => Err(Error::Config(format!("unknown task variant `{s}`"))),
        }
    }
}

/// How the sin/cos pairs of the position table pick their frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionIndexing {
    /// Both members of pair `k` share the exponent of dimension `2k`.
    #[default]
    Paired,
    /// Every dimension `d` uses its own exponent `2d/H`.
    Literal,
}

/// Input to the fine-tuning classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInput {
    /// `[C, T_1, …, T_N]` concatenated over the content tokens.
    #[default]
    AllTokens,
    /// `C` alone.
    ClsOnly,
}

/// Architectural hyperparameters. Every other module sizes itself from this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Encoder blocks (L).
    pub layers: usize,
    /// Attention heads (A).
    pub heads: usize,
    /// Hidden size (H).
    pub hidden: usize,
    pub token_size: usize,
    pub curve_length: usize,
    pub num_classes: usize,
    pub max_seq_length: usize,
    pub ffn_inner: usize,
    pub task_variant: TaskVariant,
    pub classifier_input: ClassifierInput,
    pub dropout: f64,
    pub position_base: f64,
    pub position_indexing: PositionIndexing,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            heads: 8,
            hidden: 256,
            token_size: 100,
            curve_length: 1000,
            num_classes: 12,
            max_seq_length: 23,
            ffn_inner: 256,
            task_variant: TaskVariant::NcpOmcm,
            classifier_input: ClassifierInput::AllTokens,
            dropout: 0.1,
            position_base: 1000.0,
            position_indexing: PositionIndexing::Paired,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// A config sized for `curve_length`/`token_size` with the minimum
    /// `max_seq_length` that fits a pair.
    pub fn sized(layers: usize, heads: usize, hidden: usize, token_size: usize, curve_length: usize) -> Self {
        let mut cfg = Self {
            layers,
            heads,
            hidden,
            ffn_inner: hidden,
            token_size,
            curve_length,
            ..Self::default()
        };
        cfg.max_seq_length = cfg.pair_seq_len();
        cfg
    }

    pub fn tokens_per_curve(&self) -> usize {
        self.curve_length / self.token_size.max(1)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    /// `[CLS] A [SEP] B [SEP]`
    pub fn pair_seq_len(&self) -> usize {
        2 * self.tokens_per_curve() + 3
    }

    /// `[CLS] A [SEP]`
    pub fn single_seq_len(&self) -> usize {
        self.tokens_per_curve() + 2
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.hidden == 0 || self.token_size == 0 || self.curve_length == 0 {
            return fail("heads, hidden, token_size and curve_length must be positive".into());
        }
        if self.ffn_inner == 0 {
            return fail("ffn_inner must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if !self.hidden.is_multiple_of(2) {
            return fail(format!("hidden {} must be even", self.hidden));
        }
        if !self.curve_length.is_multiple_of(self.token_size) {
            return fail(format!(
                "curve_length {} is not divisible by token_size {}",
                self.curve_length, self.token_size
            ));
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2".into());
        }
        let needed = if self.task_variant.uses_pairs() {
            self.pair_seq_len()
        } else {
            self.single_seq_len()
        };
        if self.max_seq_length < needed {
            return fail(format!(
                "max_seq_length {} is below the {needed} positions {} input needs",
                self.max_seq_length, self.task_variant
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.position_base <= 0.0 || self.layer_norm_eps <= 0.0 || self.init_std < 0.0 {
            return fail("position_base and layer_norm_eps must be positive, init_std non-negative".into());
        }
        Ok(())
    }

    /// `key = value` lines, one per field.
    pub fn to_key_values(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn from_key_values(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}
