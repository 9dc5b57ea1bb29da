//! Pre-training objectives and the classification head.
//!
//! Every function takes the encoder's final hidden states for a batch
//! (`[B·S, H]`, see [`BatchShape`]) and the composed input sequences, and
//! returns graph nodes so losses can be differentiated.

use log::warn;
use rand::Rng;

use crate::config::{ClassifierInput, ModelConfig, TaskVariant};
use crate::encoder::{BatchShape, Linear};
use crate::error::{Error, Result};
use crate::input_layer::TokenSequence;
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Output heads. Pre-training models carry the decoder and, for
/// `NCP-CLS`/`NCP-All`, the pair classifier; fine-tuning models carry only
/// the classifier.
#[derive(Debug, Clone, Copy)]
pub struct TaskHeadParams {
    /// Hidden state → raw block.
    pub mcm_decoder: Option<Linear>,
    /// Pair features → {different, same}.
    pub ncp_classifier: Option<Linear>,
    /// Curve features → class logits.
    pub finetune_classifier: Option<Linear>,
}

impl TaskHeadParams {
    pub const MCM_DECODER: &'static str = "heads.mcm_decoder";
    pub const NCP_CLASSIFIER: &'static str = "heads.ncp_classifier";
    pub const CLASSIFIER: &'static str = "heads.classifier";

    fn ncp_width(config: &ModelConfig) -> Option<usize> {
        let h = config.hidden;
        match config.task_variant {
            TaskVariant::NcpCls => Some(h),
            TaskVariant::NcpAll => Some((2 * config.tokens_per_curve() + 1) * h),
            TaskVariant::NcpNull | TaskVariant::NcpOmcm => None,
        }
    }

    fn classifier_width(config: &ModelConfig) -> usize {
        match config.classifier_input {
            ClassifierInput::AllTokens => (config.tokens_per_curve() + 1) * config.hidden,
            ClassifierInput::ClsOnly => config.hidden,
        }
    }

    pub fn init_pretraining<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let std = config.init_std;
        let mcm_decoder = Linear::init(store, Self::MCM_DECODER, config.hidden, config.token_size, std, rng)?;
        let ncp_classifier = Self::ncp_width(config)
            .map(|w| Linear::init(store, Self::NCP_CLASSIFIER, w, 2, std, rng))
            .transpose()?;
        Ok(Self {
            mcm_decoder: Some(mcm_decoder),
            ncp_classifier,
            finetune_classifier: None,
        })
    }

    pub fn init_finetuning<R: Rng + ?Sized>(store: &mut ParamStore, config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let w = Self::classifier_width(config);
        Ok(Self {
            mcm_decoder: None,
            ncp_classifier: None,
            finetune_classifier: Some(Linear::init(
                store,
                Self::CLASSIFIER,
                w,
                config.num_classes,
                config.init_std,
                rng,
            )?),
        })
    }

    /// Binds whichever heads `store` holds.
    pub fn lookup(store: &ParamStore, config: &ModelConfig) -> Result<Self> {
        let present = |name: &str| store.id(&format!("{name}.weight")).is_some();
        let mcm_decoder = present(Self::MCM_DECODER)
            .then(|| Linear::lookup(store, Self::MCM_DECODER, config.hidden, config.token_size))
            .transpose()?;
        let ncp_classifier = match (present(Self::NCP_CLASSIFIER), Self::ncp_width(config)) {
            (true, Some(w)) => Some(Linear::lookup(store, Self::NCP_CLASSIFIER, w, 2)?),
            (true, None) => {
                return Err(Error::Compatibility(format!(
                    "checkpoint has a pair classifier but {} has none",
                    config.task_variant
                )))
            }
            (false, _) => None,
        };
        let finetune_classifier = present(Self::CLASSIFIER)
            .then(|| {
                Linear::lookup(
                    store,
                    Self::CLASSIFIER,
                    Self::classifier_width(config),
                    config.num_classes,
                )
            })
            .transpose()?;
        Ok(Self {
            mcm_decoder,
            ncp_classifier,
            finetune_classifier,
        })
    }
}

fn require(head: Option<Linear>, name: &str) -> Result<Linear> {
    head.ok_or_else(|| Error::Config(format!("model has no `{name}` head")))
}

/// Per-batch pre-training loss and its parts.
#[derive(Debug, Clone, Copy)]
pub struct PretrainBatchLoss {
    pub total: Var,
    pub mcm: Var,
    /// Absent for `NCP-Null` and `NCP-OMCM`.
    pub ncp: Option<Var>,
}

/// Masked-curve reconstruction loss: each masked position's hidden state is
/// decoded to a block and compared with the original raw block by mean
/// squared error over positions and block samples.
///
/// A batch without masked positions yields a constant zero.
pub fn mcm_loss(
    g: &mut Graph,
    store: &ParamStore,
    hidden: Var,
    shape: BatchShape,
    batch: &[TokenSequence],
    decoder: &Linear,
) -> Result<Var> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, seq) in batch.iter().enumerate() {
        for t in &seq.mcm_targets {
            rows.push((0, shape.row(b, t.position)));
            targets.push(t.block.as_slice());
        }
    }
    if rows.is_empty() {
        warn!("batch has no masked positions; masked-curve loss is 0");
        return Ok(g.constant(&Tensor::scalar(0.0)));
    }
    let picked = g.gather_rows(&[hidden], &rows)?;
    let decoded = decoder.forward(g, store, picked)?;
    let target = g.constant(&Tensor::from_rows(&targets)?);
    g.mse(decoded, target)
}

/// `[B, H]` rows of the `[CLS]` position.
pub fn cls_features(g: &mut Graph, hidden: Var, shape: BatchShape) -> Result<Var> {
    let rows: Vec<_> = (0..shape.batch).map(|b| (0, shape.row(b, 0))).collect();
    g.gather_rows(&[hidden], &rows)
}

/// `[B, (N+1)·H]`: `[CLS]` followed by every content position in order.
/// Every sequence must have the same number of content tokens.
pub fn all_token_features(g: &mut Graph, hidden: Var, shape: BatchShape, batch: &[TokenSequence]) -> Result<Var> {
    let h = g.shape(hidden)[1];
    let n = batch.first().map_or(0, |s| s.content_positions().len());
    let mut rows = Vec::with_capacity(shape.batch * (n + 1));
    for (b, seq) in batch.iter().enumerate() {
        let content = seq.content_positions();
        if content.len() != n {
            return Err(Error::shape("all-token features", &[n], &[content.len()]));
        }
        rows.push((0, shape.row(b, 0)));
        rows.extend(content.into_iter().map(|p| (0, shape.row(b, p))));
    }
    let stacked = g.gather_rows(&[hidden], &rows)?;
    g.reshape(stacked, &[shape.batch, (n + 1) * h])
}

/// Same-class prediction from `[CLS]` alone.
pub fn ncp_cls_loss(
    g: &mut Graph,
    store: &ParamStore,
    hidden: Var,
    shape: BatchShape,
    labels: &[usize],
    classifier: &Linear,
) -> Result<Var> {
    let features = cls_features(g, hidden, shape)?;
    let logits = classifier.forward(g, store, features)?;
    g.cross_entropy(logits, labels)
}

/// Same-class prediction from `[CLS]` and every content token.
pub fn ncp_all_loss(
    g: &mut Graph,
    store: &ParamStore,
    hidden: Var,
    shape: BatchShape,
    batch: &[TokenSequence],
    labels: &[usize],
    classifier: &Linear,
) -> Result<Var> {
    let features = all_token_features(g, hidden, shape, batch)?;
    let logits = classifier.forward(g, store, features)?;
    g.cross_entropy(logits, labels)
}

/// Combined pre-training objective for `variant`.
///
/// Pair variants need pair input and, except `NCP-Null`, one label per pair
/// (1 = same class). `NCP-OMCM` needs single-curve input.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_loss(
    g: &mut Graph,
    store: &ParamStore,
    variant: TaskVariant,
    heads: &TaskHeadParams,
    hidden: Var,
    shape: BatchShape,
    batch: &[TokenSequence],
    ncp_labels: Option<&[usize]>,
) -> Result<PretrainBatchLoss> {
    let wants_pairs = variant.uses_pairs();
    if let Some(s) = batch.iter().find(|s| s.is_pair() != wants_pairs) {
        return Err(Error::Variant {
            variant: variant.to_string(),
            input: if s.is_pair() { "curve pairs" } else { "single curves" },
        });
    }
    let decoder = require(heads.mcm_decoder, "masked-curve decoder")?;
    let mcm = mcm_loss(g, store, hidden, shape, batch, &decoder)?;
    let ncp = match variant {
        TaskVariant::NcpCls | TaskVariant::NcpAll => {
            let labels = ncp_labels.ok_or_else(|| Error::Config(format!("{variant} needs pair labels")))?;
            let classifier = require(heads.ncp_classifier, "pair classifier")?;
            Some(if variant == TaskVariant::NcpCls {
                ncp_cls_loss(g, store, hidden, shape, labels, &classifier)?
            } else {
                ncp_all_loss(g, store, hidden, shape, batch, labels, &classifier)?
            })
        }
        TaskVariant::NcpNull | TaskVariant::NcpOmcm => None,
    };
    let total = match ncp {
        Some(n) => g.add(mcm, n)?,
        None => mcm,
    };
    Ok(PretrainBatchLoss { total, mcm, ncp })
}

/// Class logits `[B, num_classes]` for single-curve input.
pub fn finetune_logits(
    g: &mut Graph,
    store: &ParamStore,
    hidden: Var,
    shape: BatchShape,
    batch: &[TokenSequence],
    classifier: &Linear,
    mode: ClassifierInput,
) -> Result<Var> {
    if batch.iter().any(TokenSequence::is_pair) {
        return Err(Error::Variant {
            variant: "classification".into(),
            input: "curve pairs",
        });
    }
    let features = match mode {
        ClassifierInput::AllTokens => all_token_features(g, hidden, shape, batch)?,
        ClassifierInput::ClsOnly => cls_features(g, hidden, shape)?,
    };
    classifier.forward(g, store, features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::input_layer::{apply_mcm_mask, compose_input, MaskAction, McmTarget};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn tiny(variant: TaskVariant) -> ModelConfig {
        ModelConfig {
            task_variant: variant,
            num_classes: 3,
            ..ModelConfig::sized(1, 2, 4, 4, 8)
        }
    }

    fn curve(seed: u64, len: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random()).collect()
    }

    fn sequences(config: &ModelConfig, pairs: bool, n: usize) -> Vec<TokenSequence> {
        (0..n as u64)
            .map(|i| {
                let a = curve(i, config.curve_length);
                let b = curve(100 + i, config.curve_length);
                compose_input(&a, pairs.then_some(b.as_slice()), config).unwrap()
            })
            .collect()
    }

    fn target(position: usize, block: Vec<f64>, action: MaskAction) -> McmTarget {
        McmTarget {
            position,
            block,
            action,
        }
    }

    fn hidden(g: &mut Graph, shape: BatchShape, h: usize, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.rows() * h;
        let t = Tensor::new(
            &[shape.rows(), h],
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        g.leaf(&t.with_grad())
    }

    fn shape_of(batch: &[TokenSequence]) -> BatchShape {
        BatchShape {
            batch: batch.len(),
            seq_len: batch[0].len(),
        }
    }

    fn heads(config: &ModelConfig, seed: u64) -> (ParamStore, TaskHeadParams) {
        let mut store = ParamStore::new();
        let cfg = ModelConfig {
            init_std: 0.5,
            ..config.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut h = TaskHeadParams::init_pretraining(&mut store, &cfg, &mut rng).unwrap();
        h.finetune_classifier = TaskHeadParams::init_finetuning(&mut store, &cfg, &mut rng)
            .unwrap()
            .finetune_classifier;
        (store, h)
    }

    fn zero(store: &mut ParamStore, lin: &Linear) {
        store.get_mut(lin.weight).data_mut().fill(0.0);
        store.get_mut(lin.bias).data_mut().fill(0.0);
    }

    #[test]
    fn mcm_constant_decoder_cases() {
        let cfg = tiny(TaskVariant::NcpOmcm);
        let (mut store, h) = heads(&cfg, 0);
        let dec = h.mcm_decoder.unwrap();
        zero(&mut store, &dec);
        store.get_mut(dec.bias).data_mut().fill(0.5);
        let mut batch = sequences(&cfg, false, 1);
        batch[0].mcm_targets = vec![target(1, vec![0.0; 4], MaskAction::Masked)];
        let shape = shape_of(&batch);
        let mut g = Graph::new();
        let x = hidden(&mut g, shape, 4, 1);
        let l = mcm_loss(&mut g, &store, x, shape, &batch, &dec).unwrap();
        assert_eq!(g.scalar(l), 0.25);

        batch[0].mcm_targets = vec![target(2, vec![0.5; 4], MaskAction::Masked)];
        let l = mcm_loss(&mut g, &store, x, shape, &batch, &dec).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn mcm_matches_hand_mean() {
        let cfg = tiny(TaskVariant::NcpOmcm);
        let (store, h) = heads(&cfg, 2);
        let dec = h.mcm_decoder.unwrap();
        let mut batch = sequences(&cfg, false, 2);
        let blocks = [vec![0.1, 0.2, 0.3, 0.4], vec![0.9, 0.0, 0.5, 0.25]];
        batch[0].mcm_targets = vec![target(2, blocks[0].clone(), MaskAction::Masked)];
        batch[1].mcm_targets = vec![target(1, blocks[1].clone(), MaskAction::Replaced)];
        let shape = shape_of(&batch);
        let mut g = Graph::new();
        let x = hidden(&mut g, shape, 4, 3);
        let l = mcm_loss(&mut g, &store, x, shape, &batch, &dec).unwrap();

        let (w, bias) = (store.get(dec.weight).data(), store.get(dec.bias).data());
        let hv = g.value(x);
        let mut sum = 0.0;
        for (row, block) in [(2, &blocks[0]), (shape.row(1, 1), &blocks[1])] {
            for j in 0..4 {
                let r: f64 = (0..4).map(|i| hv[row * 4 + i] * w[i * 4 + j]).sum::<f64>() + bias[j];
                sum += (r - block[j]).powi(2);
            }
        }
        assert!((g.scalar(l) - sum / 8.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_contributes_zero() {
        let cfg = tiny(TaskVariant::NcpOmcm);
        let (store, h) = heads(&cfg, 0);
        let batch = sequences(&cfg, false, 2);
        let shape = shape_of(&batch);
        let mut g = Graph::new();
        let x = hidden(&mut g, shape, 4, 1);
        let l = mcm_loss(&mut g, &store, x, shape, &batch, &h.mcm_decoder.unwrap()).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn mcm_gradient_is_local_to_masked_positions() {
        let cfg = tiny(TaskVariant::NcpOmcm);
        let (store, h) = heads(&cfg, 4);
        let mut batch = sequences(&cfg, false, 2);
        apply_mcm_mask(&mut batch, 0.5, &mut ChaCha8Rng::seed_from_u64(9));
        let shape = shape_of(&batch);
        let mut g = Graph::new();
        let x = hidden(&mut g, shape, 4, 5);
        let l = mcm_loss(&mut g, &store, x, shape, &batch, &h.mcm_decoder.unwrap()).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(x).unwrap();
        for (b, seq) in batch.iter().enumerate() {
            for p in 0..seq.len() {
                let row = &grad[shape.row(b, p) * 4..][..4];
                let masked = seq.mcm_targets.iter().any(|t| t.position == p);
                assert_eq!(row.iter().any(|&v| v != 0.0), masked, "seq {b} pos {p}");
            }
        }
    }

    #[test]
    fn kept_positions_contribute() {
        let cfg = tiny(TaskVariant::NcpOmcm);
        let (store, h) = heads(&cfg, 6);
        let dec = h.mcm_decoder.unwrap();
        let mut batch = sequences(&cfg, false, 1);
        let original = batch[0].blocks[0].clone();
        batch[0].mcm_targets = vec![target(1, original.clone(), MaskAction::Masked)];
        let shape = shape_of(&batch);
        let mut g = Graph::new();
        let x = hidden(&mut g, shape, 4, 7);
        let one = mcm_loss(&mut g, &store, x, shape, &batch, &dec).unwrap();
        let kept = batch[0].blocks[1].clone();
        batch[0].mcm_targets.push(target(2, kept, MaskAction::Kept));
        let two = mcm_loss(&mut g, &store, x, shape, &batch, &dec).unwrap();
        let (one, two) = (g.scalar(one), g.scalar(two));
        assert_ne!(one, two);
    }

    #[test]
    fn zero_pair_classifier_gives_ln2() {
        let cfg = tiny(TaskVariant::NcpCls);
        let (mut store, h) = heads(&cfg, 0);
        let cls = h.ncp_classifier.unwrap();
        zero(&mut store, &cls);
        let batch = sequences(&cfg, true, 3);
        let shape = shape_of(&batch);
        let mut g = Graph::new();
        let x = hidden(&mut g, shape, 4, 1);
        let l = ncp_cls_loss(&mut g, &store, x, shape, &[0, 1, 1], &cls).unwrap();
        assert!((g.scalar(l) - LN2).abs() < 1e-15);
        assert!(matches!(
            ncp_cls_loss(&mut g, &store, x, shape, &[0, 2, 1], &cls),
            Err(Error::Label { label: 2, .. })
        ));

        let cfg = tiny(TaskVariant::NcpAll);
        let (mut store, h) = heads(&cfg, 0);
        let cls = h.ncp_classifier.unwrap();
        zero(&mut store, &cls);
        let mut g = Graph::new();
        let x = hidden(&mut g, shape, 4, 1);
        let l = ncp_all_loss(&mut g, &store, x, shape, &batch, &[1, 0, 1], &cls).unwrap();
        assert!((g.scalar(l) - LN2).abs() < 1e-15);
    }

    #[test]
    fn cls_loss_is_cross_entropy_of_head_logits() {
        let cfg = tiny(TaskVariant::NcpCls);
        let (store, h) = heads(&cfg, 8);
        let cls = h.ncp_classifier.unwrap();
        let batch = sequences(&cfg, true, 4);
        let shape = shape_of(&batch);
        let labels = [1, 0, 0, 1];
        let mut g = Graph::new();
        let x = hidden(&mut g, shape, 4, 9);
        let l = ncp_cls_loss(&mut g, &store, x, shape, &labels, &cls).unwrap();
        let f = cls_features(&mut g, x, shape).unwrap();
        let logits = cls.forward(&mut g, &store, f).unwrap();
        let direct = g.cross_entropy(logits, &labels).unwrap();
        assert_eq!(g.scalar(l).to_bits(), g.scalar(direct).to_bits());
    }

    #[test]
    fn all_token_feature_order() {
        // N = 2 content tokens, H = 2.
        let cfg = ModelConfig::sized(1, 1, 2, 2, 4);
        let batch = vec![compose_input(&[0.0; 4], None, &cfg).unwrap()];
        let shape = shape_of(&batch);
        let mut g = Graph::new();
        let rows: Vec<f64> = (0..shape.rows() * 2).map(|v| v as f64).collect();
        let x = g.leaf(&Tensor::new(&[shape.rows(), 2], rows).unwrap());
        let f = all_token_features(&mut g, x, shape, &batch).unwrap();
        assert_eq!(g.shape(f), &[1, 6]);
        // Rows 0 (CLS), 1 and 2 (content); row 3 is SEP.
        assert_eq!(g.value(f), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);

        let swapped = g.leaf(&Tensor::new(&[4, 2], vec![0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]).unwrap());
        let f2 = all_token_features(&mut g, swapped, shape, &batch).unwrap();
        assert_ne!(g.value(f), g.value(f2));
    }

    #[test]
    fn totals_follow_variant_algebra() {
        for variant in TaskVariant::ALL {
            let cfg = tiny(variant);
            let (store, h) = heads(&cfg, 10);
            let mut batch = sequences(&cfg, variant.uses_pairs(), 4);
            apply_mcm_mask(&mut batch, 0.5, &mut ChaCha8Rng::seed_from_u64(1));
            let shape = shape_of(&batch);
            let mut g = Graph::new();
            let x = hidden(&mut g, shape, 4, 11);
            let labels = [0, 1, 1, 0];
            let loss = pretrain_loss(&mut g, &store, variant, &h, x, shape, &batch, Some(&labels)).unwrap();
            let (total, mcm) = (g.scalar(loss.total), g.scalar(loss.mcm));
            match loss.ncp {
                Some(n) => {
                    assert!(variant.has_pair_head());
                    assert!((total - (mcm + g.scalar(n))).abs() < 1e-12);
                }
                None => {
                    assert!(!variant.has_pair_head());
                    assert_eq!(total.to_bits(), mcm.to_bits());
                }
            }
        }
    }

    #[test]
    fn variant_input_mismatch_is_rejected() {
        let cfg = tiny(TaskVariant::NcpOmcm);
        let (store, h) = heads(&cfg, 0);
        let pairs = sequences(&cfg, true, 2);
        let shape = shape_of(&pairs);
        let mut g = Graph::new();
        let x = hidden(&mut g, shape, 4, 1);
        let r = pretrain_loss(&mut g, &store, TaskVariant::NcpOmcm, &h, x, shape, &pairs, None);
        assert!(matches!(r, Err(Error::Variant { .. })));

        let singles = sequences(&cfg, false, 2);
        let shape = shape_of(&singles);
        let x = hidden(&mut g, shape, 4, 1);
        let r = pretrain_loss(&mut g, &store, TaskVariant::NcpNull, &h, x, shape, &singles, None);
        assert!(matches!(r, Err(Error::Variant { .. })));
    }

    #[test]
    fn total_gradient_is_sum_of_component_gradients() {
        for variant in [TaskVariant::NcpCls, TaskVariant::NcpAll] {
            let cfg = tiny(variant);
            let (store, h) = heads(&cfg, 12);
            let mut batch = sequences(&cfg, true, 3);
            apply_mcm_mask(&mut batch, 0.5, &mut ChaCha8Rng::seed_from_u64(2));
            let shape = shape_of(&batch);
            let labels = [1, 0, 1];
            let grad_of = |pick: usize| {
                let mut g = Graph::new();
                let x = hidden(&mut g, shape, 4, 13);
                let l = pretrain_loss(&mut g, &store, variant, &h, x, shape, &batch, Some(&labels)).unwrap();
                let target = [l.total, l.mcm, l.ncp.unwrap()][pick];
                g.backward(target).unwrap();
                g.grad(x).unwrap().to_vec()
            };
            let (total, mcm, ncp) = (grad_of(0), grad_of(1), grad_of(2));
            for i in 0..total.len() {
                assert!((total[i] - (mcm[i] + ncp[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn null_variant_ignores_pair_labels() {
        let cfg = tiny(TaskVariant::NcpNull);
        let (store, h) = heads(&cfg, 14);
        assert!(h.ncp_classifier.is_none());
        let mut batch = sequences(&cfg, true, 3);
        apply_mcm_mask(&mut batch, 0.5, &mut ChaCha8Rng::seed_from_u64(3));
        let shape = shape_of(&batch);
        let run = |labels: Option<&[usize]>| {
            let mut g = Graph::new();
            let x = hidden(&mut g, shape, 4, 15);
            let l = pretrain_loss(&mut g, &store, TaskVariant::NcpNull, &h, x, shape, &batch, labels).unwrap();
            g.backward(l.total).unwrap();
            let names: Vec<String> = g.param_grads().map(|(id, _)| store.name(id).to_string()).collect();
            assert!(names.iter().all(|n| !n.starts_with(TaskHeadParams::NCP_CLASSIFIER)));
            g.grad(x).unwrap().to_vec()
        };
        assert_eq!(run(None), run(Some(&[0, 0, 0])));
        assert_eq!(run(Some(&[1, 0, 1])), run(Some(&[0, 1, 0])));
    }

    #[test]
    fn finetune_logit_cases() {
        let cfg = ModelConfig {
            num_classes: 12,
            ..tiny(TaskVariant::NcpOmcm)
        };
        let (mut store, h) = heads(&cfg, 16);
        let cls = h.finetune_classifier.unwrap();
        let batch = sequences(&cfg, false, 2);
        let shape = shape_of(&batch);
        let mut g = Graph::new();
        let x = hidden(&mut g, shape, 4, 17);
        let all = finetune_logits(&mut g, &store, x, shape, &batch, &cls, ClassifierInput::AllTokens).unwrap();
        assert_eq!(g.shape(all), &[2, 12]);

        let cls_cfg = ModelConfig {
            classifier_input: ClassifierInput::ClsOnly,
            ..cfg.clone()
        };
        let (cls_store, cls_heads) = heads(&cls_cfg, 16);
        let only = cls_heads.finetune_classifier.unwrap();
        let mut g2 = Graph::new();
        let x2 = hidden(&mut g2, shape, 4, 17);
        let first = finetune_logits(&mut g2, &cls_store, x2, shape, &batch, &only, ClassifierInput::ClsOnly).unwrap();
        assert_ne!(g.value(all), g2.value(first));

        zero(&mut store, &cls);
        let mut g = Graph::new();
        let x = hidden(&mut g, shape, 4, 17);
        let z = finetune_logits(&mut g, &store, x, shape, &batch, &cls, ClassifierInput::AllTokens).unwrap();
        let p = crate::numerics::softmax(&g.tensor(z));
        assert!(p.data().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));

        let pairs = sequences(&cfg, true, 2);
        let ps = shape_of(&pairs);
        let px = hidden(&mut g, ps, 4, 1);
        assert!(finetune_logits(&mut g, &store, px, ps, &pairs, &cls, ClassifierInput::AllTokens).is_err());
    }
}
