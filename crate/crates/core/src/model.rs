//! A complete network: input layer, encoder and task heads over one
//! parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::SpectralCurve;
use crate::encoder::{encoder_forward, BatchShape, Dropout, EncoderOutput, EncoderParams};
use crate::error::{Error, Result};
use crate::input_layer::{compose_input, embed_batch, InputParams, TokenSequence};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::tasks::{finetune_logits, TaskHeadParams};

/// Sequences per graph when running inference.
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone)]
pub struct SpectrumModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub input: InputParams,
    pub encoder: EncoderParams,
    pub heads: TaskHeadParams,
}

impl SpectrumModel {
    fn backbone(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<(ParamStore, InputParams, EncoderParams)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let input = InputParams::init(&mut store, config, rng)?;
        let encoder = EncoderParams::init(&mut store, config, rng)?;
        Ok((store, input, encoder))
    }

    /// Fresh model with the masked-curve decoder and, if the variant has
    /// one, the pair classifier.
    pub fn pretraining(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut store, input, encoder) = Self::backbone(config, &mut rng)?;
        let heads = TaskHeadParams::init_pretraining(&mut store, config, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            store,
            input,
            encoder,
            heads,
        })
    }

    /// Randomly initialized classifier, no pre-training.
    pub fn finetuning(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut store, input, encoder) = Self::backbone(config, &mut rng)?;
        let heads = TaskHeadParams::init_finetuning(&mut store, config, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            store,
            input,
            encoder,
            heads,
        })
    }

    /// Classifier whose input layer and encoder start from `pretrained`; the
    /// classification head is fresh. `config` must agree with the pretrained
    /// architecture.
    pub fn from_pretrained(pretrained: &SpectrumModel, config: &ModelConfig, seed: u64) -> Result<Self> {
        check_compatible(&pretrained.config, config)?;
        let mut model = Self::finetuning(config, seed)?;
        for (name, tensor) in pretrained.store.iter() {
            if name.starts_with("input.") || name.starts_with("encoder.") {
                model.store.assign(name, tensor)?;
            }
        }
        Ok(model)
    }

    /// Binds a loaded parameter store.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let input = InputParams::lookup(&store, &config)?;
        let encoder = EncoderParams::lookup(&store, &config)?;
        let heads = TaskHeadParams::lookup(&store, &config)?;
        Ok(Self {
            config,
            store,
            input,
            encoder,
            heads,
        })
    }

    pub fn compose(&self, curve_a: &[f64], curve_b: Option<&[f64]>) -> Result<TokenSequence> {
        compose_input(curve_a, curve_b, &self.config)
    }

    /// Final hidden states `[B·S, H]` for a batch of equal-length sequences.
    pub fn forward(&self, g: &mut Graph, batch: &[TokenSequence], dropout: Dropout<'_>) -> Result<(Var, BatchShape)> {
        let x = embed_batch(g, &self.store, &self.input, &self.config, batch)?;
        let shape = BatchShape {
            batch: batch.len(),
            seq_len: batch[0].len(),
        };
        let hidden = encoder_forward(g, &self.store, &self.encoder, x, shape, &self.config, None, dropout)?;
        Ok((hidden, shape))
    }

    /// Class logits `[B, num_classes]` for single curves.
    pub fn logits(&self, g: &mut Graph, batch: &[TokenSequence], dropout: Dropout<'_>) -> Result<Var> {
        let classifier = self
            .heads
            .finetune_classifier
            .ok_or_else(|| Error::Config("model has no classifier head".into()))?;
        let (hidden, shape) = self.forward(g, batch, dropout)?;
        finetune_logits(
            g,
            &self.store,
            hidden,
            shape,
            batch,
            &classifier,
            self.config.classifier_input,
        )
    }

    /// Deterministic encoding of one curve or pair.
    pub fn encode(&self, curve_a: &[f64], curve_b: Option<&[f64]>) -> Result<EncoderOutput> {
        let seq = self.compose(curve_a, curve_b)?;
        let mut g = Graph::new();
        let (hidden, shape) = self.forward(&mut g, std::slice::from_ref(&seq), None)?;
        let h = self.config.hidden;
        let all = g.value(hidden);
        Ok(EncoderOutput {
            cls: Tensor::vector(all[..h].to_vec())?,
            tokens: Tensor::new(&[shape.seq_len - 1, h], all[h..].to_vec())?,
            kinds: seq.special_mask()[1..].to_vec(),
        })
    }

    /// Class logits for each curve, without dropout.
    pub fn predict_logits(&self, curves: &[SpectralCurve]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(curves.len());
        for chunk in curves.chunks(EVAL_BATCH) {
            let batch = chunk
                .iter()
                .map(|c| self.compose(&c.intensities, None))
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            let logits = self.logits(&mut g, &batch, None)?;
            let t = g.tensor(logits);
            out.extend((0..t.rows()).map(|r| t.row(r).to_vec()));
        }
        Ok(out)
    }

    /// Most likely class of each curve.
    pub fn predict(&self, curves: &[SpectralCurve]) -> Result<Vec<usize>> {
        Ok(self
            .predict_logits(curves)?
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                    .map_or(0, |(i, _)| i)
            })
            .collect())
    }
}

/// Fails unless a classifier for `config` can reuse `pretrained`'s input
/// layer and encoder.
pub fn check_compatible(pretrained: &ModelConfig, config: &ModelConfig) -> Result<()> {
    if pretrained.token_size != config.token_size {
        return Err(Error::Compatibility(format!(
            "token_size {} of the pre-trained model differs from {}",
            pretrained.token_size, config.token_size
        )));
    }
    let pairs = [
        ("layers", pretrained.layers, config.layers),
        ("heads", pretrained.heads, config.heads),
        ("hidden", pretrained.hidden, config.hidden),
        ("ffn_inner", pretrained.ffn_inner, config.ffn_inner),
    ];
    for (name, a, b) in pairs {
        if a != b {
            return Err(Error::Compatibility(format!(
                "{name} {a} of the pre-trained model differs from {b}"
            )));
        }
    }
    if pretrained.position_base != config.position_base || pretrained.position_indexing != config.position_indexing {
        return Err(Error::Compatibility("position embedding settings differ".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::count_parameters;
    use crate::input_layer::SpecialKind;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_classes: 3,
            dropout: 0.0,
            ..ModelConfig::sized(1, 2, 8, 4, 16)
        }
    }

    #[test]
    fn stores_match_closed_form_counts() {
        let cfg = tiny();
        let c = count_parameters(&cfg);
        assert_eq!(
            SpectrumModel::pretraining(&cfg, 0).unwrap().store.scalar_count(),
            c.pretraining_total()
        );
        assert_eq!(
            SpectrumModel::finetuning(&cfg, 0).unwrap().store.scalar_count(),
            c.finetuning_total()
        );
    }

    #[test]
    fn encode_layout() {
        let cfg = tiny();
        let m = SpectrumModel::pretraining(&cfg, 1).unwrap();
        let out = m.encode(&[0.5; 16], Some(&[0.25; 16])).unwrap();
        assert_eq!(out.cls.shape(), &[8]);
        assert_eq!(out.tokens.shape(), &[10, 8]);
        assert_eq!(out.kinds[4], SpecialKind::Sep);
        assert_eq!(out.kinds[9], SpecialKind::Sep);
    }

    #[test]
    fn from_pretrained_copies_backbone_only() {
        let cfg = tiny();
        let pre = SpectrumModel::pretraining(&cfg, 2).unwrap();
        let ft = SpectrumModel::from_pretrained(&pre, &cfg, 3).unwrap();
        for (name, t) in ft.store.iter() {
            match pre.store.by_name(name) {
                Some(p) => assert_eq!(p.data(), t.data(), "{name}"),
                None => assert!(name.starts_with("heads.classifier")),
            }
        }
        let bad = ModelConfig {
            token_size: 8,
            ..cfg.clone()
        };
        let err = SpectrumModel::from_pretrained(&pre, &bad, 3).unwrap_err();
        assert!(matches!(err, Error::Compatibility(m) if m.contains("token_size")));
    }

    #[test]
    fn predictions_cover_every_curve() {
        let cfg = tiny();
        let m = SpectrumModel::finetuning(&cfg, 4).unwrap();
        let curves: Vec<_> = (0..5)
            .map(|i| SpectralCurve::new(vec![i as f64 / 5.0; 16], Some(0), "c"))
            .collect();
        let p = m.predict(&curves).unwrap();
        assert_eq!(p.len(), 5);
        assert!(p.iter().all(|&c| c < 3));
    }
}
