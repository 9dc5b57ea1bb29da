//! Post-norm bidirectional transformer encoder.
//!
//! Each block computes
//! `x ← LN(x + Attn(x))`, then `x ← LN(x + W₂·GELU(W₁·x + b₁) + b₂)`.
//! Attention spans every position in both directions; the only masking is
//! an optional key-visibility mask for padded positions.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use crate::config::{ClassifierInput, ModelConfig, TaskVariant};
use crate::error::{Error, Result};
use crate::input_layer::{expect_param, InputParams, SpecialKind};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Additive score for keys hidden by the attention mask. Large enough that its
/// exponential underflows to exactly zero after max-subtraction.
const HIDDEN_KEY: f64 = -1e9;

/// Affine map `x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Weights from `N(0, std²)`, zero bias.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let w = (0..inputs * outputs).map(|_| normal.sample(rng)).collect();
        Ok(Self {
            weight: store.insert(format!("{name}.weight"), Tensor::new(&[inputs, outputs], w)?)?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[outputs])?)?,
        })
    }

    pub fn lookup(store: &ParamStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        Ok(Self {
            weight: expect_param(store, &format!("{name}.weight"), &[inputs, outputs])?,
            bias: expect_param(store, &format!("{name}.bias"), &[outputs])?,
        })
    }

    pub fn count(inputs: usize, outputs: usize) -> usize {
        inputs * outputs + outputs
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl Norm {
    fn init(store: &mut ParamStore, name: &str, h: usize) -> Result<Self> {
        Ok(Self {
            gain: store.insert(format!("{name}.gain"), Tensor::ones(&[h])?)?,
            shift: store.insert(format!("{name}.shift"), Tensor::zeros(&[h])?)?,
        })
    }

    fn lookup(store: &ParamStore, name: &str, h: usize) -> Result<Self> {
        Ok(Self {
            gain: expect_param(store, &format!("{name}.gain"), &[h])?,
            shift: expect_param(store, &format!("{name}.shift"), &[h])?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, eps: f64) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        g.layer_norm(x, gain, shift, eps)
    }
}

/// Parameters of one encoder block.
#[derive(Debug, Clone, Copy)]
pub struct LayerParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attn_norm: Norm,
    pub ffn_inner: Linear,
    pub ffn_outer: Linear,
    pub ffn_norm: Norm,
}

impl LayerParams {
    fn names(i: usize) -> [String; 8] {
        let p = format!("encoder.layer{i}");
        [
            format!("{p}.attn.query"),
            format!("{p}.attn.key"),
            format!("{p}.attn.value"),
            format!("{p}.attn.output"),
            format!("{p}.attn_norm"),
            format!("{p}.ffn.inner"),
            format!("{p}.ffn.outer"),
            format!("{p}.ffn_norm"),
        ]
    }

    /// Scalar count of one block.
    pub fn count(config: &ModelConfig) -> usize {
        let (h, f) = (config.hidden, config.ffn_inner);
        4 * Linear::count(h, h) + Linear::count(h, f) + Linear::count(f, h) + 4 * h
    }
}

/// The whole stack.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (h, f, std) = (config.hidden, config.ffn_inner, config.init_std);
        let layers = (0..config.layers)
            .map(|i| {
                let n = LayerParams::names(i);
                Ok(LayerParams {
                    query: Linear::init(store, &n[0], h, h, std, rng)?,
                    key: Linear::init(store, &n[1], h, h, std, rng)?,
                    value: Linear::init(store, &n[2], h, h, std, rng)?,
                    output: Linear::init(store, &n[3], h, h, std, rng)?,
                    attn_norm: Norm::init(store, &n[4], h)?,
                    ffn_inner: Linear::init(store, &n[5], h, f, std, rng)?,
                    ffn_outer: Linear::init(store, &n[6], f, h, std, rng)?,
                    ffn_norm: Norm::init(store, &n[7], h)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn lookup(store: &ParamStore, config: &ModelConfig) -> Result<Self> {
        let (h, f) = (config.hidden, config.ffn_inner);
        let layers = (0..config.layers)
            .map(|i| {
                let n = LayerParams::names(i);
                Ok(LayerParams {
                    query: Linear::lookup(store, &n[0], h, h)?,
                    key: Linear::lookup(store, &n[1], h, h)?,
                    value: Linear::lookup(store, &n[2], h, h)?,
                    output: Linear::lookup(store, &n[3], h, h)?,
                    attn_norm: Norm::lookup(store, &n[4], h)?,
                    ffn_inner: Linear::lookup(store, &n[5], h, f)?,
                    ffn_outer: Linear::lookup(store, &n[6], f, h)?,
                    ffn_norm: Norm::lookup(store, &n[7], h)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

/// Shape of a batch laid out as `[batch·seq_len, H]` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchShape {
    pub batch: usize,
    pub seq_len: usize,
}

impl BatchShape {
    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }

    pub fn row(&self, b: usize, pos: usize) -> usize {
        b * self.seq_len + pos
    }
}

/// Training-time randomness; `None` runs the encoder deterministically.
pub type Dropout<'a> = Option<&'a mut dyn RngCore>;

fn drop(g: &mut Graph, x: Var, p: f64, rng: &mut Dropout<'_>) -> Result<Var> {
    match rng {
        Some(r) => g.dropout(x, p, &mut **r),
        None => Ok(x),
    }
}

/// Multi-head attention output and the post-softmax weights
/// (`[batch·heads, seq, seq]`, before dropout).
pub struct Attention {
    pub output: Var,
    pub weights: Var,
}

/// Bidirectional multi-head self-attention over `x: [batch·seq, H]`.
///
/// `key_visible`, when given, holds one flag per row; hidden keys receive no
/// attention from any query in the same sequence.
#[allow(clippy::too_many_arguments)]
pub fn self_attention(
    g: &mut Graph,
    store: &ParamStore,
    layer: &LayerParams,
    x: Var,
    shape: BatchShape,
    config: &ModelConfig,
    key_visible: Option<&[bool]>,
    rng: &mut Dropout<'_>,
) -> Result<Attention> {
    let (h, a) = (config.hidden, config.heads);
    if a == 0 || h % a != 0 {
        return Err(Error::Config(format!("hidden {h} is not divisible by heads {a}")));
    }
    let dh = h / a;
    let BatchShape { batch, seq_len: s } = shape;
    let split = |g: &mut Graph, t: Var| -> Result<Var> {
        let t = g.reshape(t, &[batch, s, a, dh])?;
        let t = g.permute(t, &[0, 2, 1, 3])?;
        g.reshape(t, &[batch * a, s, dh])
    };
    let q = layer.query.forward(g, store, x)?;
    let k = layer.key.forward(g, store, x)?;
    let v = layer.value.forward(g, store, x)?;
    let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);

    let scores = g.bmm(q, k, true)?;
    let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    if let Some(visible) = key_visible {
        if visible.len() != shape.rows() {
            return Err(Error::shape("attention mask", &[shape.rows()], &[visible.len()]));
        }
        let mut bias = Vec::with_capacity(batch * a * s * s);
        for b in 0..batch {
            let keys: Vec<f64> = (0..s)
                .map(|j| if visible[b * s + j] { 0.0 } else { HIDDEN_KEY })
                .collect();
            for _ in 0..a * s {
                bias.extend_from_slice(&keys);
            }
        }
        scores = g.add_const(scores, &Tensor::new(&[batch * a, s, s], bias)?)?;
    }
    let weights = g.softmax(scores);
    let dropped = drop(g, weights, config.dropout, rng)?;
    let ctx = g.bmm(dropped, v, false)?;
    let ctx = g.reshape(ctx, &[batch, a, s, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[batch * s, h])?;
    let output = layer.output.forward(g, store, ctx)?;
    Ok(Attention { output, weights })
}

/// Runs every encoder block over `x: [batch·seq, H]`.
#[allow(clippy::too_many_arguments)]
pub fn encoder_forward(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    x: Var,
    shape: BatchShape,
    config: &ModelConfig,
    key_visible: Option<&[bool]>,
    mut rng: Dropout<'_>,
) -> Result<Var> {
    let eps = config.layer_norm_eps;
    let mut x = x;
    for layer in &params.layers {
        let attn = self_attention(g, store, layer, x, shape, config, key_visible, &mut rng)?;
        let a = drop(g, attn.output, config.dropout, &mut rng)?;
        let sum = g.add(x, a)?;
        x = layer.attn_norm.forward(g, store, sum, eps)?;

        let inner = layer.ffn_inner.forward(g, store, x)?;
        let act = g.gelu(inner);
        let f = layer.ffn_outer.forward(g, store, act)?;
        let f = drop(g, f, config.dropout, &mut rng)?;
        let sum = g.add(x, f)?;
        x = layer.ffn_norm.forward(g, store, sum, eps)?;
    }
    Ok(x)
}

/// Final hidden states of one sequence: `C` and `T_1 … T_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `[H]`, the `[CLS]` position.
    pub cls: Tensor,
    /// `[seq_len − 1, H]`, every position after `[CLS]` in input order.
    pub tokens: Tensor,
    /// Role of each row of `tokens`.
    pub kinds: Vec<SpecialKind>,
}

/// Trainable scalar counts by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterCount {
    pub embedding: usize,
    pub encoder: usize,
    pub mcm_decoder: usize,
    /// Same-class head; zero for variants that have none.
    pub pair_head: usize,
    pub classifier: usize,
}

impl ParameterCount {
    pub fn backbone(&self) -> usize {
        self.embedding + self.encoder
    }

    /// Input layer, encoder and the pre-training heads.
    pub fn pretraining_total(&self) -> usize {
        self.backbone() + self.mcm_decoder + self.pair_head
    }

    /// Input layer, encoder and the classification head.
    pub fn finetuning_total(&self) -> usize {
        self.backbone() + self.classifier
    }
}

/// Closed-form parameter count for `config`.
pub fn count_parameters(config: &ModelConfig) -> ParameterCount {
    let h = config.hidden;
    let n = config.tokens_per_curve();
    ParameterCount {
        embedding: InputParams::count(config),
        encoder: config.layers * LayerParams::count(config),
        mcm_decoder: Linear::count(h, config.token_size),
        pair_head: match config.task_variant {
            TaskVariant::NcpCls => Linear::count(h, 2),
            TaskVariant::NcpAll => Linear::count((2 * n + 1) * h, 2),
            TaskVariant::NcpNull | TaskVariant::NcpOmcm => 0,
        },
        classifier: match config.classifier_input {
            ClassifierInput::AllTokens => Linear::count((n + 1) * h, config.num_classes),
            ClassifierInput::ClsOnly => Linear::count(h, config.num_classes),
        },
    }
}

/// Floating-point operations (two per multiply-add) of one fine-tuning
/// forward pass on a single curve: token convolution, encoder stack and
/// classifier. Normalization, softmax and activations are not counted.
pub fn forward_flops(config: &ModelConfig) -> u64 {
    let (h, f) = (config.hidden as u64, config.ffn_inner as u64);
    let n = config.tokens_per_curve() as u64;
    let s = config.single_seq_len() as u64;
    let conv = n * h * config.token_size as u64;
    let layer = 4 * s * h * h + 2 * s * s * h + 2 * s * h * f;
    let classifier = count_parameters(config).classifier as u64 - config.num_classes as u64;
    2 * (conv + config.layers as u64 * layer + classifier)
}
