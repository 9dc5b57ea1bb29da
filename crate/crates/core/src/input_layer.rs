//! Curve tokenization and input embedding.
//!
//! A curve is cut into `token_size` blocks; each block is embedded by a
//! strided convolution whose kernel width and stride both equal `token_size`.
//! The composed input at every position is
//! `token embedding + segment embedding + position embedding`, laid out as
//! `[CLS] A… [SEP]` for one curve or `[CLS] A… [SEP] B… [SEP]` for a pair.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::config::{ModelConfig, PositionIndexing};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Selection probability for masked-curve modeling.
pub const MASK_PROBABILITY: f64 = 0.15;
/// Of the selected positions: share replaced by `[MASK]`.
pub const MASK_REPLACE_SHARE: f64 = 0.8;
/// Of the selected positions: share replaced by a random block.
pub const MASK_RANDOM_SHARE: f64 = 0.1;

const CLS_ROW: usize = 0;
const SEP_ROW: usize = 1;
const MASK_ROW: usize = 2;

/// Contiguous, non-overlapping `token_size` blocks of `curve`.
pub fn partition(curve: &[f64], token_size: usize) -> Result<Vec<Vec<f64>>> {
    if token_size == 0 || curve.is_empty() || !curve.len().is_multiple_of(token_size) {
        return Err(Error::Partition {
            length: curve.len(),
            token_size,
            remainder: if token_size == 0 {
                curve.len()
            } else {
                curve.len() % token_size
            },
        });
    }
    Ok(curve.chunks(token_size).map(<[f64]>::to_vec).collect())
}

/// Sinusoidal position vector for `pos`.
///
/// Pair `k` occupies dimensions `(2k, 2k+1)` as `(sin θ, cos θ)`. With
/// [`PositionIndexing::Paired`], `θ = pos / base^(2·2k/H)` for both members;
/// with [`PositionIndexing::Literal`] each dimension `d` uses `base^(2d/H)`.
pub fn position_embedding(pos: usize, config: &ModelConfig) -> Result<Vec<f64>> {
    if pos >= config.max_seq_length {
        return Err(Error::Position {
            pos,
            max: config.max_seq_length,
        });
    }
    let h = config.hidden as f64;
    let angle = |d: usize| pos as f64 / config.position_base.powf(2.0 * d as f64 / h);
    let mut out = vec![0.0; config.hidden];
    for k in 0..config.hidden / 2 {
        let (even, odd) = match config.position_indexing {
            PositionIndexing::Paired => (angle(2 * k), angle(2 * k)),
            PositionIndexing::Literal => (angle(2 * k), angle(2 * k + 1)),
        };
        out[2 * k] = even.sin();
        out[2 * k + 1] = odd.cos();
    }
    Ok(out)
}

/// Position embeddings for positions `0..seq_len`, as `[seq_len, H]`.
pub fn position_table(seq_len: usize, config: &ModelConfig) -> Result<Tensor> {
    let rows = (0..seq_len)
        .map(|p| position_embedding(p, config))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Learnable input-layer parameters.
#[derive(Debug, Clone, Copy)]
pub struct InputParams {
    /// `[H, token_size]` convolution kernels.
    pub kernels: ParamId,
    /// `[H]`
    pub bias: ParamId,
    /// `[3, H]`: `[CLS]`, `[SEP]`, `[MASK]`.
    pub special: ParamId,
    /// `[2, H]`: segment A, segment B.
    pub segment: ParamId,
}

impl InputParams {
    pub const KERNELS: &'static str = "input.token_conv.weight";
    pub const BIAS: &'static str = "input.token_conv.bias";
    pub const SPECIAL: &'static str = "input.special_tokens";
    pub const SEGMENT: &'static str = "input.segment_table";

    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (h, w) = (config.hidden, config.token_size);
        let bound = 1.0 / (w as f64).sqrt();
        let fan_in = Uniform::new_inclusive(-bound, bound).expect("positive bound");
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut draw = |n: usize, dist: &dyn Fn(&mut R) -> f64| (0..n).map(|_| dist(rng)).collect::<Vec<_>>();
        let kernels = draw(h * w, &|r| fan_in.sample(r));
        let bias = draw(h, &|r| fan_in.sample(r));
        let special = draw(3 * h, &|r| normal.sample(r));
        let segment = draw(2 * h, &|r| normal.sample(r));
        Ok(Self {
            kernels: store.insert(Self::KERNELS, Tensor::new(&[h, w], kernels)?)?,
            bias: store.insert(Self::BIAS, Tensor::new(&[h], bias)?)?,
            special: store.insert(Self::SPECIAL, Tensor::new(&[3, h], special)?)?,
            segment: store.insert(Self::SEGMENT, Tensor::new(&[2, h], segment)?)?,
        })
    }

    pub fn lookup(store: &ParamStore, config: &ModelConfig) -> Result<Self> {
        let (h, w) = (config.hidden, config.token_size);
        Ok(Self {
            kernels: expect_param(store, Self::KERNELS, &[h, w])?,
            bias: expect_param(store, Self::BIAS, &[h])?,
            special: expect_param(store, Self::SPECIAL, &[3, h])?,
            segment: expect_param(store, Self::SEGMENT, &[2, h])?,
        })
    }

    /// Scalar count: conv kernels and bias, three special tokens, two segments.
    pub fn count(config: &ModelConfig) -> usize {
        let h = config.hidden;
        h * config.token_size + h + 3 * h + 2 * h
    }
}

pub(crate) fn expect_param(store: &ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::Compatibility(format!("missing parameter `{name}`")))?;
    if store.get(id).shape() != shape {
        return Err(Error::Compatibility(format!(
            "parameter `{name}` has shape {:?}, config expects {shape:?}",
            store.get(id).shape()
        )));
    }
    Ok(id)
}

/// Which curve of a pair a position belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    A,
    B,
}

/// Role of a position in the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecialKind {
    Cls,
    Sep,
    Content,
}

/// What the token embedding of a content position shows the encoder.
#[derive(Debug, Clone, PartialEq)]
pub enum Shown {
    Original,
    Mask,
    /// The embedding of this raw block instead of the original.
    Replaced(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Slot {
    Cls,
    Sep,
    Content { block: usize, shown: Shown },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    Masked,
    Replaced,
    Kept,
}

/// A position selected for reconstruction and the raw block it held.
#[derive(Debug, Clone, PartialEq)]
pub struct McmTarget {
    pub position: usize,
    pub block: Vec<f64>,
    pub action: MaskAction,
}

/// Composed model input before embedding lookup.
///
/// Holds the raw blocks and what each position should show; the embedding
/// tensor itself is produced by [`embed_batch`] (on a graph) or
/// [`TokenSequence::embeddings`].
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub slots: Vec<Slot>,
    pub segment_ids: Vec<Segment>,
    /// Raw content blocks, curve A then curve B.
    pub blocks: Vec<Vec<f64>>,
    pub mcm_targets: Vec<McmTarget>,
    /// Positions of curve A's content tokens.
    pub curve_a: Range<usize>,
    /// Positions of curve B's content tokens, for pair input.
    pub curve_b: Option<Range<usize>>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_pair(&self) -> bool {
        self.curve_b.is_some()
    }

    pub fn position_ids(&self) -> Range<usize> {
        0..self.slots.len()
    }

    pub fn special_mask(&self) -> Vec<SpecialKind> {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Cls => SpecialKind::Cls,
                Slot::Sep => SpecialKind::Sep,
                Slot::Content { .. } => SpecialKind::Content,
            })
            .collect()
    }

    /// Content positions in order (`T_1 … T_N`).
    pub fn content_positions(&self) -> Vec<usize> {
        let mut p: Vec<usize> = self.curve_a.clone().collect();
        if let Some(b) = &self.curve_b {
            p.extend(b.clone());
        }
        p
    }

    /// Eager `[seq_len, H]` input representation.
    pub fn embeddings(&self, store: &ParamStore, params: &InputParams, config: &ModelConfig) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = embed_batch(&mut g, store, params, config, std::slice::from_ref(self))?;
        Ok(g.tensor(v))
    }
}

/// Lays out one curve, or a pair, as a token sequence.
pub fn compose_input(curve_a: &[f64], curve_b: Option<&[f64]>, config: &ModelConfig) -> Result<TokenSequence> {
    let a = partition(curve_a, config.token_size)?;
    let b = curve_b.map(|c| partition(c, config.token_size)).transpose()?;
    let len = 2 + a.len() + b.as_ref().map_or(0, |b| b.len() + 1);
    if len > config.max_seq_length {
        return Err(Error::SequenceTooLong {
            len,
            max: config.max_seq_length,
        });
    }
    let mut slots = Vec::with_capacity(len);
    let mut segment_ids = Vec::with_capacity(len);
    let mut blocks = Vec::with_capacity(len);
    slots.push(Slot::Cls);
    segment_ids.push(Segment::A);
    let a_start = slots.len();
    for block in a {
        slots.push(Slot::Content {
            block: blocks.len(),
            shown: Shown::Original,
        });
        segment_ids.push(Segment::A);
        blocks.push(block);
    }
    let curve_a = a_start..slots.len();
    slots.push(Slot::Sep);
    segment_ids.push(Segment::A);
    let curve_b = b.map(|b| {
        let start = slots.len();
        for block in b {
            slots.push(Slot::Content {
                block: blocks.len(),
                shown: Shown::Original,
            });
            segment_ids.push(Segment::B);
            blocks.push(block);
        }
        let range = start..slots.len();
        slots.push(Slot::Sep);
        segment_ids.push(Segment::B);
        range
    });
    Ok(TokenSequence {
        slots,
        segment_ids,
        blocks,
        mcm_targets: Vec::new(),
        curve_a,
        curve_b,
    })
}

/// Selects content positions for masked-curve modeling.
///
/// Each content position is chosen independently with probability
/// `p_select`. A chosen position shows `[MASK]` with probability 0.8, a raw
/// block drawn uniformly from all content blocks in `batch` with probability
/// 0.1, and is left as-is otherwise. Every chosen position is recorded with
/// its original block. `[CLS]`/`[SEP]` are never chosen.
pub fn apply_mcm_mask<R: Rng + ?Sized>(batch: &mut [TokenSequence], p_select: f64, rng: &mut R) {
    let pool: Vec<(usize, usize)> = batch
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| (0..seq.blocks.len()).map(move |b| (s, b)))
        .collect();
    let mut picks = Vec::new();
    for (s, seq) in batch.iter().enumerate() {
        for (pos, slot) in seq.slots.iter().enumerate() {
            let Slot::Content { block, .. } = slot else { continue };
            if p_select <= 0.0 || rng.random::<f64>() >= p_select {
                continue;
            }
            let u: f64 = rng.random();
            let action = if u < MASK_REPLACE_SHARE {
                MaskAction::Masked
            } else if u < MASK_REPLACE_SHARE + MASK_RANDOM_SHARE {
                MaskAction::Replaced
            } else {
                MaskAction::Kept
            };
            let replacement = (action == MaskAction::Replaced).then(|| pool[rng.random_range(0..pool.len())]);
            picks.push((s, pos, *block, action, replacement));
        }
    }
    for (s, pos, block, action, replacement) in picks {
        let shown = match (action, replacement) {
            (MaskAction::Masked, _) => Shown::Mask,
            (MaskAction::Replaced, Some((rs, rb))) => Shown::Replaced(batch[rs].blocks[rb].clone()),
            _ => Shown::Original,
        };
        let seq = &mut batch[s];
        seq.mcm_targets.push(McmTarget {
            position: pos,
            block: seq.blocks[block].clone(),
            action,
        });
        if let Slot::Content { shown: slot_shown, .. } = &mut seq.slots[pos] {
            *slot_shown = shown;
        }
    }
}

/// Embeds raw blocks with the token convolution: `[blocks.len(), H]`.
///
/// The blocks are laid end to end and convolved once with stride equal to
/// the kernel width, which is the same as embedding each block on its own.
pub fn embed_tokens(g: &mut Graph, store: &ParamStore, params: &InputParams, blocks: &[Vec<f64>]) -> Result<Var> {
    let width = store.get(params.kernels).shape()[1];
    if let Some(b) = blocks.iter().find(|b| b.len() != width) {
        return Err(Error::shape("embed_tokens", &[width], &[b.len()]));
    }
    let signal: Vec<f64> = blocks.concat();
    let signal = g.constant(&Tensor::vector(signal)?);
    let kernels = g.param(store, params.kernels);
    let bias = g.param(store, params.bias);
    g.conv1d(signal, kernels, bias, width)
}

/// Composes a batch of equal-length sequences into `[B·S, H]` input
/// representations (row `b·S + p` is position `p` of sequence `b`).
pub fn embed_batch(
    g: &mut Graph,
    store: &ParamStore,
    params: &InputParams,
    config: &ModelConfig,
    batch: &[TokenSequence],
) -> Result<Var> {
    let seq_len = batch.first().map_or(0, TokenSequence::len);
    if seq_len == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if let Some(s) = batch.iter().find(|s| s.len() != seq_len) {
        return Err(Error::shape("embed_batch", &[seq_len], &[s.len()]));
    }
    let mut blocks: Vec<Vec<f64>> = Vec::new();
    let mut token_index = Vec::with_capacity(batch.len() * seq_len);
    let mut segment_index = Vec::with_capacity(batch.len() * seq_len);
    for seq in batch {
        let offset = blocks.len();
        blocks.extend(seq.blocks.iter().cloned());
        for (slot, seg) in seq.slots.iter().zip(&seq.segment_ids) {
            let src = match slot {
                Slot::Cls => (1, CLS_ROW),
                Slot::Sep => (1, SEP_ROW),
                Slot::Content { shown: Shown::Mask, .. } => (1, MASK_ROW),
                Slot::Content {
                    block,
                    shown: Shown::Original,
                } => (0, offset + block),
                Slot::Content {
                    shown: Shown::Replaced(raw),
                    ..
                } => {
                    blocks.push(raw.clone());
                    (0, blocks.len() - 1)
                }
            };
            token_index.push(src);
            segment_index.push((0, if *seg == Segment::A { 0 } else { 1 }));
        }
    }
    let special = g.param(store, params.special);
    let tokens = if blocks.is_empty() {
        g.gather_rows(&[special, special], &token_index)?
    } else {
        let embedded = embed_tokens(g, store, params, &blocks)?;
        g.gather_rows(&[embedded, special], &token_index)?
    };
    let segment_table = g.param(store, params.segment);
    let segments = g.gather_rows(&[segment_table], &segment_index)?;
    let summed = g.add(tokens, segments)?;
    let pos = position_table(seq_len, config)?;
    let mut tiled = Vec::with_capacity(batch.len() * pos.len());
    for _ in 0..batch.len() {
        tiled.extend_from_slice(pos.data());
    }
    let tiled = Tensor::new(&[batch.len() * seq_len, config.hidden], tiled)?;
    g.add_const(summed, &tiled)
}
