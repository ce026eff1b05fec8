//! Reverse-mode automatic differentiation over tensors.
//!
//! A [`Tape`] records every primitive as it executes. Each recorded op keeps
//! references to its inputs plus whatever its backward rule needs (argmax
//! indices, normalized activations, dropout masks). [`Tape::backward`]
//! walks the record once in reverse, summing contributions for tensors that
//! feed several ops.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::linalg::Real;
use crate::ops::{self, ConvGeometry, Padding, PoolGeometry, PoolKind};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeometry,
    },
    Pool2d {
        input: usize,
        geom: PoolGeometry,
        argmax: Vec<usize>,
    },
    MatMul {
        a: usize,
        w: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Concat {
        inputs: Vec<usize>,
        channels: Vec<usize>,
    },
    Relu {
        x: usize,
    },
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormInfer {
        x: usize,
        gamma: usize,
        beta: usize,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
    Softmax {
        x: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    GlobalAvgPool {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Sum {
        x: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

/// Batch statistics produced by a training-mode batch-norm op.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, param: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar(format!("{v:?}")));
        }
        Ok(v.index)
    }

    fn grad_flag(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true, Some(name.into()))
    }

    /// Differentiable leaf without a parameter name.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false, None)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let (xi, ki) = (self.idx(x)?, self.idx(kernel)?);
        let bi = bias.map(|b| self.idx(b)).transpose()?;
        let (xv, kv) = (&self.nodes[xi].value, &self.nodes[ki].value);
        let bv = bi.map(|b| &self.nodes[b].value);
        let geom = ConvGeometry::infer(xv, kv, bv, stride, padding)?;
        let out = ops::conv2d(xv, kv, bv, stride, padding)?;
        let mut ids = vec![xi, ki];
        ids.extend(bi);
        let rg = self.grad_flag(&ids);
        Ok(self.push(
            out,
            Op::Conv2d {
                input: xi,
                kernel: ki,
                bias: bi,
                geom,
            },
            rg,
            None,
        ))
    }

    pub fn pool2d(&mut self, x: Var, kind: PoolKind, size: usize, stride: usize, padding: Padding) -> Result<Var> {
        let xi = self.idx(x)?;
        let (out, geom, argmax) = ops::pool2d(&self.nodes[xi].value, kind, size, stride, padding)?;
        let rg = self.grad_flag(&[xi]);
        Ok(self.push(
            out,
            Op::Pool2d {
                input: xi,
                geom,
                argmax,
            },
            rg,
            None,
        ))
    }

    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ai, wi) = (self.idx(a)?, self.idx(w)?);
        let out = ops::matmul(&self.nodes[ai].value, &self.nodes[wi].value)?;
        let rg = self.grad_flag(&[ai, wi]);
        Ok(self.push(out, Op::MatMul { a: ai, w: wi }, rg, None))
    }

    /// `x·w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let mut out = ops::matmul(&self.nodes[xi].value, &self.nodes[wi].value)?;
        let n = out.shape()[1];
        let bias = &self.nodes[bi].value;
        if bias.shape() != [n] {
            return Err(shape_err(format!(
                "dense bias shape {:?} does not match {n} outputs",
                bias.shape()
            )));
        }
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias.data()) {
                *o += bv;
            }
        }
        let rg = self.grad_flag(&[xi, wi, bi]);
        Ok(self.push(out, Op::Linear { x: xi, w: wi, b: bi }, rg, None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let out = ops::add(&self.nodes[ai].value, &self.nodes[bi].value)?;
        let rg = self.grad_flag(&[ai, bi]);
        Ok(self.push(out, Op::Add { a: ai, b: bi }, rg, None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let out = ops::mul(&self.nodes[ai].value, &self.nodes[bi].value)?;
        let rg = self.grad_flag(&[ai, bi]);
        Ok(self.push(out, Op::Mul { a: ai, b: bi }, rg, None))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let ids = inputs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = ids.iter().map(|&i| &self.nodes[i].value).collect();
        let out = ops::concat_channels(&refs)?;
        let channels = refs.iter().map(|t| t.shape()[1]).collect();
        let rg = self.grad_flag(&ids);
        Ok(self.push(out, Op::Concat { inputs: ids, channels }, rg, None))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = ops::relu(&self.nodes[xi].value);
        let rg = self.grad_flag(&[xi]);
        Ok(self.push(out, Op::Relu { x: xi }, rg, None))
    }

    /// Batch normalization using the statistics of this batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let xv = &self.nodes[xi].value;
        let (_, c, _) = ops::channel_layout(xv)?;
        let (gv, bv) = (&self.nodes[gi].value, &self.nodes[bi].value);
        check_channel_param(gv, c, "gamma")?;
        check_channel_param(bv, c, "beta")?;
        let r = ops::batch_norm_train(xv, gv.data(), bv.data(), eps)?;
        let out = Tensor::new(xv.shape(), r.output)?;
        let rg = self.grad_flag(&[xi, gi, bi]);
        let var = self.push(
            out,
            Op::BatchNormTrain {
                x: xi,
                gamma: gi,
                beta: bi,
                normalized: r.normalized,
                inv_std: r.inv_std,
            },
            rg,
            None,
        );
        Ok((
            var,
            BatchStats {
                mean: r.mean,
                var: r.var,
            },
        ))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_infer(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let xv = &self.nodes[xi].value;
        let (b, c, plane) = ops::channel_layout(xv)?;
        let (gv, bv) = (&self.nodes[gi].value, &self.nodes[bi].value);
        check_channel_param(gv, c, "gamma")?;
        check_channel_param(bv, c, "beta")?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err("batch-norm running statistics do not match channel count"));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + T::of(eps)).sqrt().recip()).collect();
        let mut normalized = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let (g, be, xd) = (gv.data(), bv.data(), xv.data());
        for n in 0..b {
            for ch in 0..c {
                let off = (n * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    normalized[i] = xh;
                    out[i] = g[ch] * xh + be[ch];
                }
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.grad_flag(&[xi, gi, bi]);
        Ok(self.push(
            out,
            Op::BatchNormInfer {
                x: xi,
                gamma: gi,
                beta: bi,
                normalized,
                inv_std,
            },
            rg,
            None,
        ))
    }

    /// Inverted dropout: zero each element with probability `rate`, scale
    /// survivors by `1/(1-rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        let xi = self.idx(x)?;
        let keep = T::of(1.0 / (1.0 - rate));
        let xv = &self.nodes[xi].value;
        let mask: Vec<T> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.grad_flag(&[xi]);
        Ok(self.push(out, Op::Dropout { x: xi, mask }, rg, None))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = ops::softmax(&self.nodes[xi].value)?;
        let rg = self.grad_flag(&[xi]);
        Ok(self.push(out, Op::Softmax { x: xi }, rg, None))
    }

    /// Mean categorical cross-entropy of `softmax(logits)` against `labels`,
    /// differentiated as one fused op (`(p − onehot)/B`).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.idx(logits)?;
        let (loss, probs) = ops::softmax_cross_entropy(&self.nodes[li].value, labels)?;
        let rg = self.grad_flag(&[li]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: li,
                labels: labels.to_vec(),
                probs,
            },
            rg,
            None,
        ))
    }

    /// Probabilities saved by a [`Tape::softmax_cross_entropy`] node.
    pub fn cross_entropy_probs(&self, loss: Var) -> Result<Tensor<T>> {
        let li = self.idx(loss)?;
        match &self.nodes[li].op {
            Op::SoftmaxCrossEntropy { logits, probs, .. } => {
                Tensor::new(self.nodes[*logits].value.shape(), probs.clone())
            }
            _ => Err(invalid("variable is not a softmax cross-entropy node")),
        }
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = ops::global_avg_pool(&self.nodes[xi].value)?;
        let rg = self.grad_flag(&[xi]);
        Ok(self.push(out, Op::GlobalAvgPool { x: xi }, rg, None))
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let b = xv.shape()[0];
        let out = xv.clone().reshape([b, xv.len() / b])?;
        let rg = self.grad_flag(&[xi]);
        Ok(self.push(out, Op::Reshape { x: xi }, rg, None))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let total = self.nodes[xi].value.sum();
        let rg = self.grad_flag(&[xi]);
        Ok(self.push(Tensor::scalar(total), Op::Sum { x: xi }, rg, None))
    }

    /// Gradients of the scalar `loss` with respect to every leaf on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);
        let mut leaves = BTreeMap::new();

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let send = |grads: &mut Vec<Option<Vec<T>>>, target: usize, contrib: Vec<T>| {
                if !self.nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    leaves.insert(i, g);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geom,
                } => {
                    let want_dx = self.nodes[*input].requires_grad;
                    let (dx, dw, db) = ops::conv2d_backward(
                        geom,
                        self.nodes[*input].value.data(),
                        self.nodes[*kernel].value.data(),
                        &g,
                        want_dx,
                    );
                    if let Some(dx) = dx {
                        send(&mut grads, *input, dx);
                    }
                    send(&mut grads, *kernel, dw);
                    if let Some(b) = bias {
                        send(&mut grads, *b, db);
                    }
                }
                Op::Pool2d { input, geom, argmax } => {
                    send(&mut grads, *input, ops::pool2d_backward(geom, argmax, &g));
                }
                Op::MatMul { a, w } => {
                    let (da, dw) = ops::matmul_backward(&self.nodes[*a].value, &self.nodes[*w].value, &g);
                    send(&mut grads, *a, da);
                    send(&mut grads, *w, dw);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw) = ops::matmul_backward(&self.nodes[*x].value, &self.nodes[*w].value, &g);
                    let n = self.nodes[*b].value.len();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    send(&mut grads, *x, dx);
                    send(&mut grads, *w, dw);
                    send(&mut grads, *b, db);
                }
                Op::Add { a, b } => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g);
                }
                Op::Mul { a, b } => {
                    let av = self.nodes[*a].value.data();
                    let bv = self.nodes[*b].value.data();
                    let da = g.iter().zip(bv).map(|(&gi, &v)| gi * v).collect();
                    let db = g.iter().zip(av).map(|(&gi, &v)| gi * v).collect();
                    send(&mut grads, *a, da);
                    send(&mut grads, *b, db);
                }
                Op::Concat { inputs, channels } => {
                    let shape = node.value.shape();
                    let parts = ops::split_channels(&g, shape[0], channels, shape[2] * shape[3]);
                    for (&inp, part) in inputs.iter().zip(parts) {
                        send(&mut grads, inp, part);
                    }
                }
                Op::Relu { x } => {
                    let y = node.value.data();
                    let dx = g
                        .iter()
                        .zip(y)
                        .map(|(&gi, &yi)| if yi > T::zero() { gi } else { T::zero() })
                        .collect();
                    send(&mut grads, *x, dx);
                }
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                } => {
                    let layout = ops::channel_layout(&self.nodes[*x].value)?;
                    let gv = self.nodes[*gamma].value.data();
                    let (dx, dg, db) = ops::batch_norm_train_backward(layout, normalized, inv_std, gv, &g);
                    send(&mut grads, *x, dx);
                    send(&mut grads, *gamma, dg);
                    send(&mut grads, *beta, db);
                }
                Op::BatchNormInfer {
                    x,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                } => {
                    let layout = ops::channel_layout(&self.nodes[*x].value)?;
                    let (b, c, plane) = layout;
                    let gv = self.nodes[*gamma].value.data();
                    let (dg, db) = ops::affine_param_grads(layout, normalized, &g);
                    let mut dx = g.clone();
                    for n in 0..b {
                        for ch in 0..c {
                            let s = gv[ch] * inv_std[ch];
                            dx[(n * c + ch) * plane..][..plane].iter_mut().for_each(|v| *v *= s);
                        }
                    }
                    send(&mut grads, *x, dx);
                    send(&mut grads, *gamma, dg);
                    send(&mut grads, *beta, db);
                }
                Op::Dropout { x, mask } => {
                    let dx = g.iter().zip(mask).map(|(&gi, &m)| gi * m).collect();
                    send(&mut grads, *x, dx);
                }
                Op::Softmax { x } => {
                    let k = node.value.shape()[1];
                    send(&mut grads, *x, ops::softmax_backward(node.value.data(), &g, k));
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let k = self.nodes[*logits].value.shape()[1];
                    let scale = g[0] / T::of(labels.len() as f64);
                    let mut dx = probs.clone();
                    for (row, &label) in dx.chunks_exact_mut(k).zip(labels) {
                        row[label] -= T::one();
                        row.iter_mut().for_each(|v| *v *= scale);
                    }
                    send(&mut grads, *logits, dx);
                }
                Op::GlobalAvgPool { x } => {
                    let (_, _, h, w) = self.nodes[*x].value.dims4()?;
                    let plane = h * w;
                    let inv = T::of(1.0 / plane as f64);
                    let mut dx = Vec::with_capacity(g.len() * plane);
                    for &gv in &g {
                        dx.extend(std::iter::repeat_n(gv * inv, plane));
                    }
                    send(&mut grads, *x, dx);
                }
                Op::Reshape { x } => send(&mut grads, *x, g),
                Op::Sum { x } => {
                    let n = self.nodes[*x].value.len();
                    send(&mut grads, *x, vec![g[0]; n]);
                }
            }
        }

        let mut by_index = BTreeMap::new();
        let mut params = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let data = leaves.remove(&i).unwrap_or_else(|| vec![T::zero(); node.value.len()]);
            let grad = Tensor::new(node.value.shape(), data)?;
            if !grad.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {}",
                    node.param.as_deref().unwrap_or("input")
                )));
            }
            match &node.param {
                Some(name) => {
                    params.insert(name.clone(), grad);
                }
                None => {
                    by_index.insert(i, grad);
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            names: self
                .nodes
                .iter()
                .enumerate()
                .filter_map(|(i, n)| n.param.as_ref().map(|p| (i, p.clone())))
                .collect(),
            inputs: by_index,
            params,
        })
    }
}

fn check_channel_param<T: Real>(t: &Tensor<T>, c: usize, what: &str) -> Result<()> {
    if t.shape() != [c] {
        return Err(shape_err(format!(
            "batch-norm {what} shape {:?} does not match {c} channels",
            t.shape()
        )));
    }
    Ok(())
}

/// Result of [`Tape::backward`]: gradients for named parameters and for
/// unnamed differentiable leaves. Unreached leaves get zero gradients.
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u64,
    names: BTreeMap<usize, String>,
    inputs: BTreeMap<usize, Tensor<T>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        match self.names.get(&v.index) {
            Some(name) => self.params.get(name),
            None => self.inputs.get(&v.index),
        }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}
