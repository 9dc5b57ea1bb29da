//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to run its adjoint. [`Graph::backward`] walks the tape in reverse from
//! a scalar root and accumulates gradients into the leaves. Intermediate
//! adjoints live only for the duration of one backward pass, so repeated
//! backward calls accumulate into leaves exactly once per call.

use std::collections::HashMap;

use rand::Rng;

use super::gemm::gemm;
use super::params::{ParamId, ParamStore};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Reshape(Var),
    Permute {
        x: Var,
        map: Vec<usize>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Conv1d {
        signal: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
    },
    GatherRows {
        sources: Vec<Var>,
        index: Vec<(usize, usize)>,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
    param: Option<ParamId>,
}

/// A single-threaded computation tape.
///
/// Parameters are copied onto the tape on first use, so a graph is bound to
/// one store and sees that store's values as they were at that moment.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
        None => *slot = Some(delta),
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            needs_grad,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, t: &Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            grad: None,
            needs_grad,
            op: Op::Leaf,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `t` as a leaf; it receives gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t, t.requires_grad())
    }

    /// Records `t` as a constant that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t, false)
    }

    /// Records a stored parameter as a leaf. Each parameter is copied onto the
    /// tape at most once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push_leaf(t, t.requires_grad());
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("graph nodes hold consistent shapes")
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradients accumulated on parameter leaves.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes.iter().filter_map(|n| Some((n.param?, n.grad.as_deref()?)))
    }

    pub fn reset_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * factor).collect();
        self.push(self.shape(x).to_vec(), value, Op::Scale(x, factor), &[x])
    }

    /// Adds `bias` (shape `[n]`) to every length-`n` row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let value = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), value, Op::AddRow(x, bias), &[x, bias]))
    }

    /// Adds a non-differentiable tensor of identical shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::shape("add_const", self.shape(x), c.shape()));
        }
        let value = self.value(x).iter().zip(c.data()).map(|(a, b)| a + b).collect();
        Ok(self.push(self.shape(x).to_vec(), value, Op::AddConst(x), &[x]))
    }

    /// Elementwise product with a non-differentiable factor.
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        if factor.len() != self.value(x).len() {
            return Err(Error::shape("mul_const", self.shape(x), &[factor.len()]));
        }
        let value = self.value(x).iter().zip(&factor).map(|(a, b)| a * b).collect();
        Ok(self.push(self.shape(x).to_vec(), value, Op::MulConst(x, factor), &[x]))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`. Identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.mul_const(x, mask)
    }

    /// `[.., k] × [k, n] → [.., n]`; leading dimensions of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = numel(sa) / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut value = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut value, false);
        Ok(self.push(shape, value, Op::MatMul(a, b), &[a, b]))
    }

    /// `x·W + b` for `W: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_row(y, bias)
    }

    /// Batched product `[B, m, k] × [B, k, n]`, or `[B, m, k] × [B, n, k]ᵀ`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let err = || Error::shape("bmm", sa, sb);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(err());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(err());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(err());
            }
            sb[2]
        };
        let mut value = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut value[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        Ok(self.push(vec![batch, m, n], value, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &in_shape, perm));
        }
        let mut in_strides = vec![1; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let total = numel(&in_shape);
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let xv = self.value(x);
        let value = map.iter().map(|&i| xv[i]).collect();
        Ok(self.push(out_shape, value, Op::Permute { x, map }, &[x]))
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = last_dim(self.shape(x));
        let mut value = self.value(x).to_vec();
        for row in value.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(self.shape(x).to_vec(), value, Op::Softmax(x), &[x])
    }

    /// Normalizes each last-axis row to zero mean and unit variance, then
    /// applies `gain` and `shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let h = last_dim(self.shape(x));
        if self.shape(gain) != [h] || self.shape(shift) != [h] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (g, s) = (self.value(gain), self.value(shift));
        let xv = self.value(x);
        let rows = xv.len() / h;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut value = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * h..(r + 1) * h];
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / h as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..h {
                let xh = (row[j] - mean) * istd;
                xhat[r * h + j] = xh;
                value[r * h + j] = xh * g[j] + s[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            shift,
            xhat,
            inv_std,
        };
        Ok(self.push(self.shape(x).to_vec(), value, op, &[x, gain, shift]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        self.push(self.shape(x).to_vec(), value, Op::Gelu(x), &[x])
    }

    /// Strided 1-D convolution of a `[length]` signal with `[out, width]`
    /// kernels, producing `[windows, out]`.
    pub fn conv1d(&mut self, signal: Var, kernels: Var, bias: Var, stride: usize) -> Result<Var> {
        let (ss, ks) = (self.shape(signal), self.shape(kernels));
        if ss.len() != 1 || ks.len() != 2 || stride == 0 || self.shape(bias) != [ks[0]] {
            return Err(Error::shape("conv1d", ss, ks));
        }
        let (length, out, width) = (ss[0], ks[0], ks[1]);
        if length < width || (length - width) % stride != 0 {
            let remainder = if length < width {
                length
            } else {
                (length - width) % stride
            };
            return Err(Error::Tiling {
                length,
                width,
                stride,
                remainder,
            });
        }
        let windows = (length - width) / stride + 1;
        let patches = im2col(self.value(signal), windows, width, stride);
        let mut value = vec![0.0; windows * out];
        gemm(
            windows,
            width,
            out,
            &patches,
            false,
            self.value(kernels),
            true,
            &mut value,
            false,
        );
        let b = self.value(bias);
        for row in value.chunks_mut(out) {
            row.iter_mut().zip(b).for_each(|(v, b)| *v += b);
        }
        let op = Op::Conv1d {
            signal,
            kernels,
            bias,
            stride,
        };
        Ok(self.push(vec![windows, out], value, op, &[signal, kernels, bias]))
    }

    /// Assembles a `[index.len(), width]` matrix whose row `r` is row
    /// `index[r].1` of `sources[index[r].0]`. Every source is viewed as
    /// `[rows, width]` over its last axis.
    pub fn gather_rows(&mut self, sources: &[Var], index: &[(usize, usize)]) -> Result<Var> {
        let first = *sources.first().ok_or_else(|| Error::shape("gather_rows", &[], &[]))?;
        let width = last_dim(self.shape(first));
        for &s in sources {
            if last_dim(self.shape(s)) != width {
                return Err(Error::shape("gather_rows", self.shape(first), self.shape(s)));
            }
        }
        if index.is_empty() {
            return Err(Error::shape("gather_rows", self.shape(first), &[0]));
        }
        let mut value = Vec::with_capacity(index.len() * width);
        for &(src, row) in index {
            let v = self.value(
                *sources
                    .get(src)
                    .ok_or_else(|| Error::shape("gather_rows", &[sources.len()], &[src]))?,
            );
            if (row + 1) * width > v.len() {
                return Err(Error::shape("gather_rows", &[v.len() / width, width], &[row]));
            }
            value.extend_from_slice(&v[row * width..(row + 1) * width]);
        }
        let op = Op::GatherRows {
            sources: sources.to_vec(),
            index: index.to_vec(),
        };
        Ok(self.push(vec![index.len(), width], value, op, sources))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Vec::new(), vec![s], Op::Mean(x), &[x])
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).len() as f64;
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / n;
        Ok(self.push(Vec::new(), vec![s], Op::Mse(a, b), &[a, b]))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross_entropy", shape, &[labels.len()]));
        }
        let classes = shape[1];
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Label { index, label, classes });
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv[i * classes..(i + 1) * classes];
            let lse = log_sum_exp(row);
            total += lse - row[y];
            for j in 0..classes {
                probs[i * classes + j] = (row[j] - lse).exp();
            }
        }
        let value = vec![total / labels.len() as f64];
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Vec::new(), value, op, &[logits]))
    }

    /// Runs reverse-mode accumulation from a scalar `loss`.
    ///
    /// Leaf gradients accumulate across calls; use [`Graph::reset_grads`] to
    /// clear them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Arity(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let wants = |v: Var| nodes[v.0].needs_grad;
            let mut send = |v: Var, delta: Vec<f64>| {
                if nodes[v.0].needs_grad {
                    accumulate(&mut grads[v.0], delta);
                }
            };
            match &node.op {
                Op::Leaf => leaves.push((i, g)),
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|v| -v).collect());
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if wants(*a) {
                        send(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                    }
                    if wants(*b) {
                        send(*b, g.iter().zip(av).map(|(g, x)| g * x).collect());
                    }
                }
                Op::Scale(x, f) => send(*x, g.iter().map(|v| v * f).collect()),
                Op::AddRow(x, bias) => {
                    if wants(*bias) {
                        let n = nodes[bias.0].value.len();
                        let mut db = vec![0.0; n];
                        for row in g.chunks(n) {
                            db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                        send(*bias, db);
                    }
                    send(*x, g);
                }
                Op::AddConst(x) | Op::Reshape(x) => send(*x, g),
                Op::MulConst(x, f) => send(*x, g.iter().zip(f).map(|(g, f)| g * f).collect()),
                Op::MatMul(a, b) => {
                    let sb = &nodes[b.0].shape;
                    let (k, n) = (sb[0], sb[1]);
                    let m = g.len() / n;
                    if wants(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &g, false, &nodes[b.0].value, true, &mut da, false);
                        send(*a, da);
                    }
                    if wants(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, &nodes[a.0].value, true, &g, false, &mut db, false);
                        send(*b, db);
                    }
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    let sa = &nodes[a.0].shape;
                    let (batch, m, k) = (sa[0], sa[1], sa[2]);
                    let n = g.len() / (batch * m);
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if wants(*a) {
                        let mut da = vec![0.0; batch * m * k];
                        for i in 0..batch {
                            // C = A·B → dA = dC·Bᵀ;  C = A·Bᵀ → dA = dC·B
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &bv[i * k * n..(i + 1) * k * n],
                                !trans_b,
                                &mut da[i * m * k..(i + 1) * m * k],
                                false,
                            );
                        }
                        send(*a, da);
                    }
                    if wants(*b) {
                        let mut db = vec![0.0; batch * k * n];
                        for i in 0..batch {
                            let (gi, ai) = (&g[i * m * n..(i + 1) * m * n], &av[i * m * k..(i + 1) * m * k]);
                            let out = &mut db[i * k * n..(i + 1) * k * n];
                            if *trans_b {
                                // dB = dCᵀ·A, [n, k]
                                gemm(n, m, k, gi, true, ai, false, out, false);
                            } else {
                                // dB = Aᵀ·dC, [k, n]
                                gemm(k, m, n, ai, true, gi, false, out, false);
                            }
                        }
                        send(*b, db);
                    }
                }
                Op::Permute { x, map } => {
                    let mut dx = vec![0.0; g.len()];
                    for (o, &src) in map.iter().enumerate() {
                        dx[src] = g[o];
                    }
                    send(*x, dx);
                }
                Op::Softmax(x) => {
                    let n = last_dim(&node.shape);
                    let mut dx = vec![0.0; g.len()];
                    for ((dxr, yr), gr) in dx.chunks_mut(n).zip(node.value.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            dxr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    send(*x, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    shift,
                    xhat,
                    inv_std,
                } => {
                    let h = last_dim(&node.shape);
                    let gv = &nodes[gain.0].value;
                    if wants(*gain) || wants(*shift) {
                        let mut dg = vec![0.0; h];
                        let mut ds = vec![0.0; h];
                        for (gr, xr) in g.chunks(h).zip(xhat.chunks(h)) {
                            for j in 0..h {
                                dg[j] += gr[j] * xr[j];
                                ds[j] += gr[j];
                            }
                        }
                        send(*gain, dg);
                        send(*shift, ds);
                    }
                    if wants(*x) {
                        let mut dx = vec![0.0; g.len()];
                        let hf = h as f64;
                        for r in 0..inv_std.len() {
                            let gr = &g[r * h..(r + 1) * h];
                            let xr = &xhat[r * h..(r + 1) * h];
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for j in 0..h {
                                let d = gr[j] * gv[j];
                                sum_d += d;
                                sum_dx += d * xr[j];
                            }
                            for j in 0..h {
                                let d = gr[j] * gv[j];
                                dx[r * h + j] = inv_std[r] / hf * (hf * d - sum_d - xr[j] * sum_dx);
                            }
                        }
                        send(*x, dx);
                    }
                }
                Op::Gelu(x) => {
                    let dx = nodes[x.0]
                        .value
                        .iter()
                        .zip(&g)
                        .map(|(&v, g)| {
                            let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                            g * (0.5 * (1.0 + t) + 0.5 * v * dt)
                        })
                        .collect();
                    send(*x, dx);
                }
                Op::Conv1d {
                    signal,
                    kernels,
                    bias,
                    stride,
                } => {
                    let ks = &nodes[kernels.0].shape;
                    let (out, width) = (ks[0], ks[1]);
                    let windows = node.shape[0];
                    if wants(*bias) {
                        let mut db = vec![0.0; out];
                        for row in g.chunks(out) {
                            db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                        send(*bias, db);
                    }
                    if wants(*kernels) {
                        let patches = im2col(&nodes[signal.0].value, windows, width, *stride);
                        let mut dk = vec![0.0; out * width];
                        gemm(out, windows, width, &g, true, &patches, false, &mut dk, false);
                        send(*kernels, dk);
                    }
                    if wants(*signal) {
                        let mut dp = vec![0.0; windows * width];
                        gemm(
                            windows,
                            out,
                            width,
                            &g,
                            false,
                            &nodes[kernels.0].value,
                            false,
                            &mut dp,
                            false,
                        );
                        let mut ds = vec![0.0; nodes[signal.0].value.len()];
                        for w in 0..windows {
                            for j in 0..width {
                                ds[w * stride + j] += dp[w * width + j];
                            }
                        }
                        send(*signal, ds);
                    }
                }
                Op::GatherRows { sources, index } => {
                    let width = last_dim(&node.shape);
                    let mut deltas: Vec<Option<Vec<f64>>> = sources
                        .iter()
                        .map(|s| wants(*s).then(|| vec![0.0; nodes[s.0].value.len()]))
                        .collect();
                    for (r, &(src, row)) in index.iter().enumerate() {
                        if let Some(d) = &mut deltas[src] {
                            d[row * width..(row + 1) * width]
                                .iter_mut()
                                .zip(&g[r * width..(r + 1) * width])
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                    for (s, d) in sources.iter().zip(deltas) {
                        if let Some(d) = d {
                            send(*s, d);
                        }
                    }
                }
                Op::Sum(x) => {
                    let n = nodes[x.0].value.len();
                    send(*x, vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = nodes[x.0].value.len();
                    send(*x, vec![g[0] / n as f64; n]);
                }
                Op::Mse(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let c = 2.0 * g[0] / av.len() as f64;
                    let diff: Vec<f64> = av.iter().zip(bv).map(|(x, y)| c * (x - y)).collect();
                    if wants(*b) {
                        send(*b, diff.iter().map(|v| -v).collect());
                    }
                    send(*a, diff);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let classes = nodes[logits.0].shape[1];
                    let c = g[0] / labels.len() as f64;
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * c).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        dl[i * classes + y] -= c;
                    }
                    send(*logits, dl);
                }
            }
        }

        for (i, g) in leaves {
            accumulate(&mut self.nodes[i].grad, g);
        }
        Ok(())
    }
}

fn im2col(signal: &[f64], windows: usize, width: usize, stride: usize) -> Vec<f64> {
    let mut patches = Vec::with_capacity(windows * width);
    for w in 0..windows {
        patches.extend_from_slice(&signal[w * stride..w * stride + width]);
    }
    patches
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
