//! Pre-training and fine-tuning loops, evaluation and experiment plumbing.

mod checkpoint;
mod metrics;
mod report;
mod search;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{sample_pair_indices, DatasetSplit, SpectralCurve};
use crate::error::{Error, Result};
use crate::input_layer::{apply_mcm_mask, TokenSequence, MASK_PROBABILITY};
use crate::model::SpectrumModel;
use crate::numerics::{adam_step, AdamConfig, AdamState, Graph};
use crate::tasks::{mcm_loss, pretrain_loss};

pub use checkpoint::{Checkpoint, RngState};
pub use metrics::{weighted_metrics, MetricsReport};
pub use report::{
    confusion_csv, finetune_history_csv, grid_csv, pretrain_history_csv, repeat_csv, reports_csv, summary_text,
};
pub use search::{grid_search, repeat_runs, GridOutcome, GridResult, GridSpec, MeanVariance, RepeatSummary};

/// RNG streams derived from a run seed. Parameter initialization uses the
/// default stream 0.
const TRAIN_STREAM: u64 = 1;
const VALID_MASK_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// Loop settings. Pre-training early-stops on validation masked-curve loss,
/// fine-tuning on validation weighted F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub phase: Phase,
    pub batch_size: usize,
    pub max_epoch: usize,
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub mask_probability: f64,
}

impl TrainSpec {
    pub fn pretraining() -> Self {
        Self {
            phase: Phase::Pretrain,
            batch_size: 64,
            max_epoch: 2000,
            patience: 20,
            seed: 0,
            adam: AdamConfig::default(),
            mask_probability: MASK_PROBABILITY,
        }
    }

    pub fn finetuning() -> Self {
        Self {
            phase: Phase::Finetune,
            batch_size: 128,
            ..Self::pretraining()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_epoch == 0 || self.patience >= self.max_epoch {
            return Err(Error::Config(format!(
                "need 0 <= patience < max_epoch, got patience {} and max_epoch {}",
                self.patience, self.max_epoch
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_probability) {
            return Err(Error::Config("mask_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    fn expect(&self, phase: Phase) -> Result<()> {
        self.validate()?;
        if self.phase != phase {
            return Err(Error::Config(format!(
                "expected a {phase:?} spec, got {:?}",
                self.phase
            )));
        }
        Ok(())
    }
}

/// One pre-training epoch: mean batch losses and the validation score.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub mcm: f64,
    pub ncp: Option<f64>,
    pub total: f64,
    pub validation: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// State at the best validation epoch.
    pub checkpoint: Checkpoint,
    pub history: Vec<PretrainEpoch>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_weighted_f1: f64,
    pub valid_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    /// Test-set metrics of the best-validation model.
    pub report: MetricsReport,
    /// Validation metrics of the best-validation model.
    pub validation: MetricsReport,
    pub history: Vec<FinetuneEpoch>,
}

/// Tracks the best score and decides when patience has run out.
struct EarlyStop {
    best: f64,
    best_epoch: usize,
    waited: usize,
    patience: usize,
    higher_is_better: bool,
}

impl EarlyStop {
    fn new(patience: usize, higher_is_better: bool) -> Self {
        Self {
            best: if higher_is_better {
                f64::NEG_INFINITY
            } else {
                f64::INFINITY
            },
            best_epoch: 0,
            waited: 0,
            patience,
            higher_is_better,
        }
    }

    /// Records `score`; returns whether it is a new best.
    fn observe(&mut self, epoch: usize, score: f64) -> bool {
        let better = if self.higher_is_better {
            score > self.best
        } else {
            score < self.best
        };
        if better {
            self.best = score;
            self.best_epoch = epoch;
            self.waited = 0;
        } else {
            self.waited += 1;
        }
        better
    }

    fn exhausted(&self) -> bool {
        self.waited >= self.patience
    }
}

fn finite(value: f64, what: &str, epoch: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Data(format!("{what} became {value} in epoch {epoch}")))
    }
}

fn labels_of(curves: &[SpectralCurve]) -> Result<Vec<usize>> {
    curves
        .iter()
        .map(|c| {
            c.label
                .ok_or_else(|| Error::Data(format!("curve `{}` has no label", c.source_id)))
        })
        .collect()
}

fn step(model: &mut SpectrumModel, graph: &Graph, optimizer: &mut AdamState) -> Result<()> {
    model.store.zero_grads();
    model.store.absorb_grads(graph)?;
    adam_step(&mut model.store, optimizer)
}

/// Validation sequences for pre-training: unlabeled, masked once with a
/// fixed stream. Pair variants pair each curve with its successor.
fn pretrain_validation_set(
    model: &SpectrumModel,
    valid: &[SpectralCurve],
    spec: &TrainSpec,
) -> Result<Vec<TokenSequence>> {
    let pairs = model.config.task_variant.uses_pairs();
    let mut seqs = valid
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let partner = pairs.then(|| valid[(i + 1) % valid.len()].intensities.as_slice());
            model.compose(&c.intensities, partner)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = spec.rng(VALID_MASK_STREAM);
    for chunk in seqs.chunks_mut(spec.batch_size) {
        apply_mcm_mask(chunk, spec.mask_probability, &mut rng);
    }
    Ok(seqs)
}

fn validation_mcm(model: &SpectrumModel, seqs: &[TokenSequence], batch_size: usize) -> Result<f64> {
    let decoder = model
        .heads
        .mcm_decoder
        .ok_or_else(|| Error::Config("model has no masked-curve decoder".into()))?;
    let (mut sum, mut count) = (0.0, 0);
    for chunk in seqs.chunks(batch_size) {
        let mut g = Graph::new();
        let (hidden, shape) = model.forward(&mut g, chunk, None)?;
        let loss = mcm_loss(&mut g, &model.store, hidden, shape, chunk, &decoder)?;
        let n: usize = chunk.iter().map(|s| s.mcm_targets.len()).sum();
        sum += g.scalar(loss) * n as f64;
        count += n;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Pre-trains a fresh model on `train` and returns the best checkpoint.
///
/// Pair variants draw `train.len()` fresh pairs per epoch (half same-class);
/// `NCP-OMCM` shuffles single curves. Only `train` labels are read, and only
/// to form pairs. The validation score is the masked-curve loss on `valid`
/// (training loss when `valid` is empty).
pub fn pretrain(
    config: &ModelConfig,
    train: &[SpectralCurve],
    valid: &[SpectralCurve],
    spec: &TrainSpec,
) -> Result<PretrainOutcome> {
    spec.expect(Phase::Pretrain)?;
    let mut model = SpectrumModel::pretraining(config, spec.seed)?;
    pretrain_model(&mut model, train, valid, spec)
}

/// [`pretrain`] starting from an existing model.
pub fn pretrain_model(
    model: &mut SpectrumModel,
    train: &[SpectralCurve],
    valid: &[SpectralCurve],
    spec: &TrainSpec,
) -> Result<PretrainOutcome> {
    spec.expect(Phase::Pretrain)?;
    let variant = model.config.task_variant;
    let pairs = variant.uses_pairs();
    if train.is_empty() || (pairs && train.len() < 2) {
        return Err(Error::Data(format!(
            "{} training curves cannot form a batch",
            train.len()
        )));
    }
    let valid_set = pretrain_validation_set(model, valid, spec)?;
    let mut optimizer = AdamState::new(spec.adam, &model.store);
    let mut rng = spec.rng(TRAIN_STREAM);
    let mut stop = EarlyStop::new(spec.patience, false);
    let mut history = Vec::new();
    let mut best = None;

    for epoch in 1..=spec.max_epoch {
        let items: Vec<(usize, Option<usize>, usize)> = if pairs {
            sample_pair_indices(train, train.len(), &mut rng)?
                .into_iter()
                .map(|(a, b, same)| (a, Some(b), usize::from(same)))
                .collect()
        } else {
            let mut idx: Vec<usize> = (0..train.len()).collect();
            idx.shuffle(&mut rng);
            idx.into_iter().map(|i| (i, None, 0)).collect()
        };
        let (mut mcm_sum, mut ncp_sum, mut total_sum, mut batches) = (0.0, 0.0, 0.0, 0);
        for chunk in items.chunks(spec.batch_size) {
            let mut seqs = chunk
                .iter()
                .map(|&(a, b, _)| model.compose(&train[a].intensities, b.map(|b| train[b].intensities.as_slice())))
                .collect::<Result<Vec<_>>>()?;
            apply_mcm_mask(&mut seqs, spec.mask_probability, &mut rng);
            let labels: Vec<usize> = chunk.iter().map(|t| t.2).collect();
            let mut g = Graph::new();
            let (hidden, shape) = model.forward(&mut g, &seqs, Some(&mut rng))?;
            let loss = pretrain_loss(
                &mut g,
                &model.store,
                variant,
                &model.heads,
                hidden,
                shape,
                &seqs,
                pairs.then_some(labels.as_slice()),
            )?;
            g.backward(loss.total)?;
            step(model, &g, &mut optimizer)?;
            mcm_sum += g.scalar(loss.mcm);
            ncp_sum += loss.ncp.map_or(0.0, |n| g.scalar(n));
            total_sum += g.scalar(loss.total);
            batches += 1;
        }
        let n = batches as f64;
        let total = finite(total_sum / n, "pre-training loss", epoch)?;
        let validation = if valid_set.is_empty() {
            total
        } else {
            finite(
                validation_mcm(model, &valid_set, spec.batch_size)?,
                "validation loss",
                epoch,
            )?
        };
        let record = PretrainEpoch {
            epoch,
            mcm: mcm_sum / n,
            ncp: variant.has_pair_head().then_some(ncp_sum / n),
            total,
            validation,
        };
        debug!("pretrain epoch {epoch}: {record:?}");
        history.push(record);
        if stop.observe(epoch, validation) {
            best = Some((model.store.clone(), optimizer.clone(), RngState::capture(&rng)));
        }
        if stop.exhausted() {
            info!("pre-training stopped at epoch {epoch}; best epoch {}", stop.best_epoch);
            break;
        }
    }
    let (params, optimizer, rng) = best.expect("at least one epoch ran");
    Ok(PretrainOutcome {
        checkpoint: Checkpoint {
            config: model.config.clone(),
            params,
            optimizer: Some(optimizer),
            epoch: stop.best_epoch,
            best_score: stop.best,
            rng,
        },
        history,
    })
}

/// Scores `model` on labeled curves.
pub fn evaluate(model: &SpectrumModel, curves: &[SpectralCurve]) -> Result<MetricsReport> {
    let labels = labels_of(curves)?;
    let predictions = model.predict(curves)?;
    let mut report = weighted_metrics(&predictions, &labels, model.config.num_classes)?;
    report.config = Some(model.config.clone());
    Ok(report)
}

/// Trains a classifier and reports test metrics of the best-validation
/// model. With `pretrained`, the input layer and encoder start from its
/// parameters; otherwise everything is randomly initialized.
pub fn finetune(
    pretrained: Option<&Checkpoint>,
    config: &ModelConfig,
    split: &DatasetSplit,
    spec: &TrainSpec,
) -> Result<FinetuneOutcome> {
    spec.expect(Phase::Finetune)?;
    let seed = spec.seed;
    let mut model = match pretrained {
        Some(ck) => SpectrumModel::from_pretrained(&ck.model()?, config, seed)?,
        None => SpectrumModel::finetuning(config, seed)?,
    };
    let train = &split.train;
    let labels = labels_of(train)?;
    if train.is_empty() || split.valid.is_empty() {
        return Err(Error::Data(
            "fine-tuning needs non-empty train and validation sets".into(),
        ));
    }
    let mut optimizer = AdamState::new(spec.adam, &model.store);
    let mut rng = spec.rng(TRAIN_STREAM);
    let mut stop = EarlyStop::new(spec.patience, true);
    let mut history = Vec::new();
    let mut best = None;
    let sequences = train
        .iter()
        .map(|c| model.compose(&c.intensities, None))
        .collect::<Result<Vec<_>>>()?;

    for epoch in 1..=spec.max_epoch {
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0);
        for chunk in idx.chunks(spec.batch_size) {
            let batch: Vec<TokenSequence> = chunk.iter().map(|&i| sequences[i].clone()).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let logits = model.logits(&mut g, &batch, Some(&mut rng))?;
            let loss = g.cross_entropy(logits, &targets)?;
            g.backward(loss)?;
            step(&mut model, &g, &mut optimizer)?;
            loss_sum += g.scalar(loss);
            batches += 1;
        }
        let train_loss = finite(loss_sum / batches as f64, "fine-tuning loss", epoch)?;
        let valid = evaluate(&model, &split.valid)?;
        history.push(FinetuneEpoch {
            epoch,
            train_loss,
            valid_weighted_f1: valid.weighted_f1,
            valid_accuracy: valid.accuracy,
        });
        debug!(
            "finetune epoch {epoch}: loss {train_loss:.5} valid F1 {:.4}",
            valid.weighted_f1
        );
        if stop.observe(epoch, valid.weighted_f1) {
            best = Some((model.store.clone(), optimizer.clone(), RngState::capture(&rng), valid));
        }
        if stop.exhausted() {
            info!("fine-tuning stopped at epoch {epoch}; best epoch {}", stop.best_epoch);
            break;
        }
    }
    let (params, optimizer, rng, mut validation) = best.expect("at least one epoch ran");
    let best_model = SpectrumModel::from_store(model.config.clone(), params.clone())?;
    let mut report = evaluate(&best_model, &split.test)?;
    report.run_seed = seed;
    validation.run_seed = seed;
    Ok(FinetuneOutcome {
        checkpoint: Checkpoint {
            config: best_model.config,
            params,
            optimizer: Some(optimizer),
            epoch: stop.best_epoch,
            best_score: stop.best,
            rng,
        },
        report,
        validation,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TaskVariant;
    use crate::data::{generate_synthetic, position_only_specs, split_dataset};

    fn tiny(variant: TaskVariant) -> ModelConfig {
        ModelConfig {
            task_variant: variant,
            num_classes: 2,
            ..ModelConfig::sized(1, 2, 8, 4, 16)
        }
    }

    fn curves(n_per_class: usize, seed: u64) -> Vec<SpectralCurve> {
        generate_synthetic(&position_only_specs((4.0, 11.0), 1.5, 0.02), n_per_class, 16, seed).unwrap()
    }

    fn pre_spec(epochs: usize) -> TrainSpec {
        TrainSpec {
            batch_size: 16,
            max_epoch: epochs,
            patience: epochs - 1,
            seed: 3,
            adam: AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            },
            ..TrainSpec::pretraining()
        }
    }

    #[test]
    fn spec_validation() {
        assert!(TrainSpec::pretraining().validate().is_ok());
        assert_eq!(TrainSpec::finetuning().batch_size, 128);
        let bad = TrainSpec {
            patience: 2000,
            ..TrainSpec::pretraining()
        };
        assert!(bad.validate().is_err());
        let bad = TrainSpec {
            batch_size: 0,
            ..TrainSpec::pretraining()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn early_stop_tracks_best() {
        let mut s = EarlyStop::new(2, false);
        assert!(s.observe(1, 3.0));
        assert!(s.observe(2, 2.0));
        assert!(!s.observe(3, 2.5));
        assert!(!s.exhausted());
        assert!(!s.observe(4, 2.0));
        assert!(s.exhausted());
        assert_eq!((s.best_epoch, s.best), (2, 2.0));
    }

    #[test]
    fn pretraining_reduces_mcm_loss() {
        let data = curves(25, 1);
        let spec = TrainSpec {
            batch_size: 8,
            ..pre_spec(30)
        };
        // Scoring the training curves under one fixed mask removes the
        // noise of which blocks each epoch happens to mask.
        let cfg = ModelConfig {
            dropout: 0.0,
            ..ModelConfig::sized(1, 2, 16, 4, 16)
        };
        let out = pretrain(&cfg, &data, &data, &spec).unwrap();
        let first = out.history[0].validation;
        let last = out.history.last().unwrap().validation;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = curves(5, 2);
        let cfg = tiny(TaskVariant::NcpCls);
        let spec = TrainSpec {
            adam: AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            ..pre_spec(3)
        };
        let out = pretrain(&cfg, &data, &data, &spec).unwrap();
        let fresh = SpectrumModel::pretraining(&cfg, spec.seed).unwrap();
        for ((_, a), (_, b)) in fresh.store.iter().zip(out.checkpoint.params.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let data = curves(6, 3);
        for variant in TaskVariant::ALL {
            let cfg = tiny(variant);
            let a = pretrain(&cfg, &data, &data[..4], &pre_spec(3)).unwrap();
            let b = pretrain(&cfg, &data, &data[..4], &pre_spec(3)).unwrap();
            assert_eq!(a.history, b.history, "{variant}");
            assert_eq!(a.history[0].ncp.is_some(), variant.has_pair_head());
        }
    }

    #[test]
    fn early_stopping_returns_best_epoch() {
        let data = curves(6, 4);
        let spec = TrainSpec {
            patience: 2,
            ..pre_spec(40)
        };
        let out = pretrain(&tiny(TaskVariant::NcpOmcm), &data, &data[..4], &spec).unwrap();
        let best = out.checkpoint.epoch;
        assert!(out.history.len() <= best + spec.patience);
        let min = out.history.iter().map(|e| e.validation).fold(f64::INFINITY, f64::min);
        assert_eq!(out.checkpoint.best_score, min);
        assert_eq!(out.history[best - 1].validation, min);
    }

    #[test]
    fn finetune_is_reproducible_and_checks_compatibility() {
        let data = curves(10, 5);
        let split = split_dataset(&data, 0.2, 0).unwrap();
        let cfg = tiny(TaskVariant::NcpOmcm);
        let pre = pretrain(&cfg, &split.train, &split.valid, &pre_spec(3)).unwrap();
        let spec = TrainSpec {
            max_epoch: 4,
            patience: 2,
            ..TrainSpec::finetuning()
        };
        let a = finetune(Some(&pre.checkpoint), &cfg, &split, &spec).unwrap();
        let b = finetune(Some(&pre.checkpoint), &cfg, &split, &spec).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.history, b.history);
        assert_eq!(a.report.per_class_support.iter().sum::<usize>(), split.test.len());

        let scratch = finetune(None, &cfg, &split, &spec).unwrap();
        assert_ne!(scratch.history, a.history);

        let other = ModelConfig {
            token_size: 8,
            ..cfg.clone()
        };
        assert!(matches!(
            finetune(Some(&pre.checkpoint), &other, &split, &spec),
            Err(Error::Compatibility(_))
        ));
    }

    #[test]
    fn tiny_datasets_are_rejected() {
        let data = curves(1, 6);
        assert!(pretrain(&tiny(TaskVariant::NcpCls), &data[..1], &[], &pre_spec(3)).is_err());
        assert!(pretrain(&tiny(TaskVariant::NcpOmcm), &[], &[], &pre_spec(3)).is_err());
    }
}
