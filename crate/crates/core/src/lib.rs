//! Block-tokenized bidirectional transformer for 1-D spectral curves.
//!
//! Curves are cut into fixed-width blocks, each block is embedded by a strided
//! 1-D convolution, and the resulting token sequence (with `[CLS]`/`[SEP]`
//! markers, segment and sinusoidal position embeddings) runs through a
//! post-norm transformer encoder. Pre-training reconstructs masked blocks
//! (optionally alongside a same-class pair objective); fine-tuning classifies
//! single curves from the concatenated token outputs.
//!
//! ```text
//! curve ─ partition ─ conv1d ─┐
//!          [CLS] [SEP] [MASK] ├─ + segment + position ─ encoder × L ─ heads
//! ```

pub mod data;
pub mod encoder;
pub mod error;
pub mod input_layer;
pub mod model;
pub mod numerics;
pub mod tasks;
pub mod trainer;

mod config;

pub use config::{ClassifierInput, ModelConfig, PositionIndexing, TaskVariant};
pub use data::{CurvePair, DatasetSplit, SpectralCurve, SyntheticClassSpec};
pub use encoder::{count_parameters, forward_flops, ParameterCount};
pub use error::{Error, Result};
pub use input_layer::TokenSequence;
pub use model::SpectrumModel;
pub use numerics::{AdamConfig, Graph, ParamStore, Tensor, Var};
pub use tasks::TaskHeadParams;
pub use trainer::{Checkpoint, MetricsReport, TrainSpec};
