//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to a [`Graph`]; node ids are therefore a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Values are never touched by the backward pass.

mod gradcheck;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{sum, Scalar};
use crate::tensor::{broadcast_shape, numel, Tensor};

pub use gradcheck::{grad_check, grad_check_extended, grad_check_params, GradCheckReport, Objective};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Unary(Var, Pointwise),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var, usize),
    MaskFill(Var, Vec<bool>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    AvgPool {
        x: Var,
        windows: Vec<(usize, usize)>,
    },
    UnfoldCausal {
        x: Var,
        kernel: usize,
    },
    Dropout(Var, Vec<F>),
    L1 {
        pred: Var,
        target: Var,
        weights: Vec<F>,
    },
    Bce {
        logits: Var,
        targets: Vec<F>,
        weights: Vec<F>,
        pos_weight: F,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// One differentiation graph. Parameters are borrowed from a [`ParamStore`]
/// and materialised as leaves on first use.
pub struct Graph<'p, F: Scalar> {
    nodes: Vec<Node<F>>,
    params: Option<&'p ParamStore<F>>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'p, F: Scalar> Default for Graph<'p, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, F: Scalar> Graph<'p, F> {
    /// Graph without parameters, gradients enabled, dropout off.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: HashMap::new(),
            grad_enabled: true,
            dropout_rng: None,
        }
    }

    pub fn with_params(params: &'p ParamStore<F>) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    /// Training graph: dropout active, driven by a generator seeded from `dropout_seed`.
    pub fn training(params: &'p ParamStore<F>, dropout_seed: u64) -> Self {
        Self {
            params: Some(params),
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
            ..Self::new()
        }
    }

    /// Forward-only graph; no node requires grad.
    pub fn no_grad(params: &'p ParamStore<F>) -> Self {
        Self {
            params: Some(params),
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node; `requires_grad` is ignored in no-grad graphs.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (never receives gradient).
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let v = self.leaf(store.value(id).clone(), true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).broadcast_zip(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).broadcast_zip(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).broadcast_zip(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn pointwise(&mut self, x: Var, f: Pointwise) -> Result<Var> {
        let xv = self.value(x);
        let out = match f {
            Pointwise::Relu => xv.map(|v| if v > F::zero() { v } else { F::zero() }),
            Pointwise::Sigmoid => xv.map(sigmoid),
            Pointwise::Tanh => xv.map(|v| v.tanh()),
            Pointwise::Exp => xv.map(|v| v.exp()),
            Pointwise::Log => {
                if let Some(bad) = xv.data().iter().find(|&&v| v <= F::zero() || v.is_nan()) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                xv.map(|v| v.ln())
            }
        };
        Ok(self.push(out, Op::Unary(x, f), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.pointwise(x, Pointwise::Relu).expect("relu is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.pointwise(x, Pointwise::Sigmoid).expect("sigmoid is total")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.pointwise(x, Pointwise::Tanh).expect("tanh is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.pointwise(x, Pointwise::Exp).expect("exp is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, Pointwise::Log)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(perm)?;
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(Error::Axis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        Ok(self.push(out, Op::Softmax(x, axis), &[x]))
    }

    /// Replaces entries where `mask` is false with `-inf`; `mask` is
    /// broadcast (right-aligned) against `x`.
    pub fn mask_fill_neg_inf(&mut self, x: Var, mask: &[bool], mask_shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if numel(mask_shape) != mask.len()
            || broadcast_shape(xv.shape(), mask_shape).as_deref() != Some(xv.shape())
        {
            return Err(Error::dim("mask_fill", xv.shape(), mask_shape));
        }
        let m = Tensor::new(
            mask_shape.to_vec(),
            mask.iter().map(|&b| if b { F::one() } else { F::zero() }).collect(),
        )?;
        let expanded = xv.broadcast_zip(&m, |_, b| b)?;
        let keep: Vec<bool> = expanded.data().iter().map(|&b| b > F::zero()).collect();
        let data = xv
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v } else { F::neg_infinity() })
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MaskFill(x, keep), &[x]))
    }

    /// Normalises over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if xv.rank() == 0 || self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::dim("layer_norm", xv.shape(), self.value(gamma).shape()));
        }
        let rows = xv.len() / d.max(1);
        let df = F::lit(d as f64);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = sum(row.iter().copied()) / df;
            let var = sum(row.iter().map(|&v| (v - mean) * (v - mean))) / df;
            let rs = F::one() / (var + eps).sqrt();
            rstd.push(rs);
            xhat.extend(row.iter().map(|&v| (v - mean) * rs));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let data = xhat
            .chunks(d.max(1))
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((&h, &gg), &bb)| h * gg + bb))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum_all());
        self.push(out, Op::Sum(x, None), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Empty("mean of empty tensor"));
        }
        let out = Tensor::scalar(self.value(x).sum_all() / F::lit(n as f64));
        Ok(self.push(out, Op::Mean(x, None), &[x]))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).sum_axis(axis)?;
        Ok(self.push(out, Op::Sum(x, Some(axis)), &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (_, n, _) = self.value(x).axis_split(axis, "mean")?;
        if n == 0 {
            return Err(Error::Empty("mean over empty axis"));
        }
        let inv = F::one() / F::lit(n as f64);
        let out = self.value(x).sum_axis(axis)?.map(|v| v * inv);
        Ok(self.push(out, Op::Mean(x, Some(axis)), &[x]))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow(axis, start, len)?;
        Ok(self.push(out, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&vals, axis)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::dim("embedding", tv.shape(), &[0, 0]));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::IndexOutOfRange {
                    what: "embedding table",
                    index: id,
                    size: v,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Unpadded average pooling over the rows of `[T, d]`. When `T < kernel`
    /// the whole sequence forms one window.
    pub fn avg_pool_1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || kernel == 0 || stride == 0 {
            return Err(Error::dim("avg_pool_1d", xv.shape(), &[kernel, stride]));
        }
        let (t, d) = (xv.shape()[0], xv.shape()[1]);
        if t == 0 {
            return Err(Error::Empty("avg_pool_1d input"));
        }
        let windows = pool_windows(t, kernel, stride);
        let mut data = Vec::with_capacity(windows.len() * d);
        for &(s, len) in &windows {
            let inv = F::one() / F::lit(len as f64);
            let mut acc = vec![F::zero(); d];
            for r in s..s + len {
                for (a, &v) in acc.iter_mut().zip(xv.row(r)) {
                    *a += v;
                }
            }
            data.extend(acc.into_iter().map(|a| a * inv));
        }
        let out = Tensor::new(vec![windows.len(), d], data)?;
        Ok(self.push(out, Op::AvgPool { x, windows }, &[x]))
    }

    /// `[T, C] -> [T, kernel * C]`; row `t` holds rows `t-kernel+1 ..= t`
    /// (zeros before the start). A matmul on the result is a causal 1-D convolution.
    pub fn unfold_causal(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || kernel == 0 {
            return Err(Error::dim("unfold_causal", xv.shape(), &[kernel]));
        }
        let (t, c) = (xv.shape()[0], xv.shape()[1]);
        let mut data = vec![F::zero(); t * kernel * c];
        for row in 0..t {
            for j in 0..kernel {
                let src = row + j;
                if src + 1 < kernel {
                    continue;
                }
                let src = src + 1 - kernel;
                data[(row * kernel + j) * c..(row * kernel + j + 1) * c].copy_from_slice(xv.row(src));
            }
        }
        let out = Tensor::new(vec![t, kernel * c], data)?;
        Ok(self.push(out, Op::UnfoldCausal { x, kernel }, &[x]))
    }

    /// Inverted dropout; identity outside training graphs or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let keep = F::lit(1.0 / (1.0 - p));
        let n = self.nodes[x.0].value.len();
        let mask: Vec<F> = (0..n)
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Dropout(x, mask), &[x])
    }

    fn loss_weights(&self, shape: &[usize], mask: Option<&Tensor<F>>, op: &'static str) -> Result<Vec<F>> {
        let n = numel(shape);
        let m = match mask {
            None => vec![F::one(); n],
            Some(m) => {
                let probe = Tensor::zeros(shape.to_vec());
                if broadcast_shape(shape, m.shape()).as_deref() != Some(shape) {
                    return Err(Error::dim(op, shape, m.shape()));
                }
                probe.broadcast_zip(m, |_, b| b)?.into_data()
            }
        };
        let total: F = sum(m.iter().copied());
        if total <= F::zero() {
            return Err(Error::EmptyMask(op));
        }
        Ok(m.into_iter().map(|v| v / total).collect())
    }

    /// Masked mean absolute error: `sum |pred - target| * mask / sum mask`.
    pub fn l1_loss(&mut self, pred: Var, target: Var, mask: Option<&Tensor<F>>) -> Result<Var> {
        let (pv, tv) = (self.value(pred), self.value(target));
        if pv.shape() != tv.shape() {
            return Err(Error::dim("l1_loss", pv.shape(), tv.shape()));
        }
        let weights = self.loss_weights(pv.shape(), mask, "l1_loss")?;
        let loss: F = sum(
            pv.data()
                .iter()
                .zip(tv.data())
                .zip(&weights)
                .map(|((&p, &t), &w)| (p - t).abs() * w),
        );
        Ok(self.push(
            Tensor::scalar(loss),
            Op::L1 {
                pred,
                target,
                weights,
            },
            &[pred, target],
        ))
    }

    /// Masked mean of `pos_weight * y * softplus(-x) + (1 - y) * softplus(x)`.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        targets: &Tensor<F>,
        pos_weight: F,
        mask: Option<&Tensor<F>>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(Error::dim("bce_with_logits", lv.shape(), targets.shape()));
        }
        let weights = self.loss_weights(lv.shape(), mask, "bce_with_logits")?;
        let loss: F = sum(
            lv.data()
                .iter()
                .zip(targets.data())
                .zip(&weights)
                .map(|((&x, &y), &w)| w * (pos_weight * y * softplus(-x) + (F::one() - y) * softplus(x))),
        );
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits,
                targets: targets.data().to_vec(),
                weights,
                pos_weight,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar loss. Every reachable node that requires
    /// grad gets a gradient; fan-out contributions add up.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), F::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, gi) in self.input_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
            // Interior grads are not kept; only leaves are reported.
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every parameter materialised in this graph.
    pub fn param_grads(&self, grads: &Gradients<F>) -> Vec<(ParamId, Tensor<F>)> {
        let mut out: Vec<(ParamId, Tensor<F>)> = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn input_grads(&self, node: &Node<F>, g: &Tensor<F>) -> Result<Vec<(Var, Tensor<F>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let shape = |v: Var| self.nodes[v.0].value.shape();
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.sum_to_shape(shape(*a))?), (*b, g.sum_to_shape(shape(*b))?)],
            Op::Sub(a, b) => vec![
                (*a, g.sum_to_shape(shape(*a))?),
                (*b, g.map(|v| -v).sum_to_shape(shape(*b))?),
            ],
            Op::Mul(a, b) => vec![
                (*a, g.broadcast_zip(val(*b), |x, y| x * y)?.sum_to_shape(shape(*a))?),
                (*b, g.broadcast_zip(val(*a), |x, y| x * y)?.sum_to_shape(shape(*b))?),
            ],
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * *c))],
            Op::Unary(x, f) => {
                let y = &node.value;
                let xv = val(*x);
                let gx = match f {
                    Pointwise::Relu => g.broadcast_zip(xv, |gv, v| if v > F::zero() { gv } else { F::zero() })?,
                    Pointwise::Sigmoid => g.broadcast_zip(y, |gv, s| gv * s * (F::one() - s))?,
                    Pointwise::Tanh => g.broadcast_zip(y, |gv, t| gv * (F::one() - t * t))?,
                    Pointwise::Exp => g.broadcast_zip(y, |gv, e| gv * e)?,
                    Pointwise::Log => g.broadcast_zip(xv, |gv, v| gv / v)?,
                };
                vec![(*x, gx)]
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = g.matmul(&bv.transpose()?)?.sum_to_shape(av.shape())?;
                let gb = av.transpose()?.matmul(g)?.sum_to_shape(bv.shape())?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(shape(*x).to_vec())?)],
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*x, g.permute(&inv)?)]
            }
            Op::Softmax(x, axis) => {
                let y = &node.value;
                let (outer, n, inner) = y.axis_split(*axis, "softmax backward")?;
                let mut gx = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = F::zero();
                        for j in 0..n {
                            let k = base + j * inner;
                            dot += g.data()[k] * y.data()[k];
                        }
                        for j in 0..n {
                            let k = base + j * inner;
                            gx[k] = y.data()[k] * (g.data()[k] - dot);
                        }
                    }
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), gx)?)]
            }
            Op::MaskFill(x, keep) => {
                let data = g
                    .data()
                    .iter()
                    .zip(keep)
                    .map(|(&v, &k)| if k { v } else { F::zero() })
                    .collect();
                vec![(*x, Tensor::new(g.shape().to_vec(), data)?)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let df = F::lit(d as f64);
                let gam = val(*gamma).data();
                let mut gg = vec![F::zero(); d];
                let mut gb = vec![F::zero(); d];
                let mut gx = vec![F::zero(); g.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut s1 = F::zero();
                    let mut s2 = F::zero();
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                        gb[j] += gr[j];
                        let gh = gr[j] * gam[j];
                        s1 += gh;
                        s2 += gh * hr[j];
                    }
                    for j in 0..d {
                        let gh = gr[j] * gam[j];
                        gx[r * d + j] = rs / df * (df * gh - s1 - hr[j] * s2);
                    }
                }
                vec![
                    (*x, Tensor::new(g.shape().to_vec(), gx)?),
                    (*gamma, Tensor::new(vec![d], gg)?),
                    (*beta, Tensor::new(vec![d], gb)?),
                ]
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let xs = shape(*x);
                let scale = match (&node.op, axis) {
                    (Op::Mean(..), None) => F::one() / F::lit(numel(xs) as f64),
                    (Op::Mean(..), Some(a)) => F::one() / F::lit(xs[*a] as f64),
                    _ => F::one(),
                };
                let gx = match axis {
                    None => Tensor::full(xs.to_vec(), g.data()[0] * scale),
                    Some(a) => {
                        let mut kept = xs.to_vec();
                        kept[*a] = 1;
                        let gk = g.map(|v| v * scale).reshape(kept)?;
                        Tensor::zeros(xs.to_vec()).broadcast_zip(&gk, |_, b| b)?
                    }
                };
                vec![(*x, gx)]
            }
            Op::Narrow { x, axis, start } => {
                let xs = shape(*x);
                let (outer, n, inner) = val(*x).axis_split(*axis, "narrow backward")?;
                let len = g.shape()[*axis];
                let mut gx = vec![F::zero(); numel(xs)];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, Tensor::new(xs.to_vec(), gx)?)]
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = shape(p)[*axis];
                    out.push((p, g.narrow(*axis, start, n)?));
                    start += n;
                }
                out
            }
            Op::Embedding { table, ids } => {
                let ts = shape(*table);
                let d = ts[1];
                let mut gt = vec![F::zero(); numel(ts)];
                for (r, &id) in ids.iter().enumerate() {
                    for (a, &v) in gt[id * d..(id + 1) * d].iter_mut().zip(g.row(r)) {
                        *a += v;
                    }
                }
                vec![(*table, Tensor::new(ts.to_vec(), gt)?)]
            }
            Op::AvgPool { x, windows } => {
                let xs = shape(*x);
                let d = xs[1];
                let mut gx = vec![F::zero(); numel(xs)];
                for (w, &(s, len)) in windows.iter().enumerate() {
                    let inv = F::one() / F::lit(len as f64);
                    for r in s..s + len {
                        for (a, &v) in gx[r * d..(r + 1) * d].iter_mut().zip(g.row(w)) {
                            *a += v * inv;
                        }
                    }
                }
                vec![(*x, Tensor::new(xs.to_vec(), gx)?)]
            }
            Op::UnfoldCausal { x, kernel } => {
                let xs = shape(*x);
                let (t, c) = (xs[0], xs[1]);
                let mut gx = vec![F::zero(); t * c];
                for row in 0..t {
                    for j in 0..*kernel {
                        if row + j + 1 < *kernel {
                            continue;
                        }
                        let src = row + j + 1 - kernel;
                        let gs = &g.data()[(row * kernel + j) * c..(row * kernel + j + 1) * c];
                        for (a, &v) in gx[src * c..(src + 1) * c].iter_mut().zip(gs) {
                            *a += v;
                        }
                    }
                }
                vec![(*x, Tensor::new(xs.to_vec(), gx)?)]
            }
            Op::Dropout(x, mask) => {
                let data = g.data().iter().zip(mask).map(|(&v, &m)| v * m).collect();
                vec![(*x, Tensor::new(g.shape().to_vec(), data)?)]
            }
            Op::L1 { pred, target, weights } => {
                let g0 = g.data()[0];
                let (pv, tv) = (val(*pred), val(*target));
                let gp: Vec<F> = pv
                    .data()
                    .iter()
                    .zip(tv.data())
                    .zip(weights)
                    .map(|((&p, &t), &w)| {
                        let s = if p > t {
                            F::one()
                        } else if p < t {
                            -F::one()
                        } else {
                            F::zero()
                        };
                        g0 * s * w
                    })
                    .collect();
                let gt = gp.iter().map(|&v| -v).collect();
                vec![
                    (*pred, Tensor::new(pv.shape().to_vec(), gp)?),
                    (*target, Tensor::new(pv.shape().to_vec(), gt)?),
                ]
            }
            Op::Bce {
                logits,
                targets,
                weights,
                pos_weight,
            } => {
                let g0 = g.data()[0];
                let lv = val(*logits);
                let data = lv
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&x, &y), &w)| {
                        let s = sigmoid(x);
                        g0 * w * (*pos_weight * y * (s - F::one()) + (F::one() - y) * s)
                    })
                    .collect();
                vec![(*logits, Tensor::new(lv.shape().to_vec(), data)?)]
            }
        })
    }
}

/// `(start, len)` of each pooling window over `t` frames.
pub fn pool_windows(t: usize, kernel: usize, stride: usize) -> Vec<(usize, usize)> {
    if t < kernel {
        return vec![(0, t)];
    }
    (0..(t - kernel) / stride + 1).map(|i| (i * stride, kernel)).collect()
}

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn linear_and_fan_out() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.scale(x, 2.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.add(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1., 2.]), true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn relu_sigmoid_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1., 0., 2.]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0., 0., 2.]);
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).data(), &[0.5]);
    }

    #[test]
    fn log_of_nonpositive_is_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[1., 0.]));
        assert!(matches!(g.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn layer_norm_constant_row_and_affine_collapse() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 3], &[5., 5., 5.]));
        let one = g.constant(Tensor::ones(vec![3]));
        let zero = g.constant(Tensor::zeros(vec![3]));
        let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0., 0., 0.]);

        let x = g.constant(t(&[2, 3], &[1., 2., 4., -3., 0., 9.]));
        let b = g.constant(t(&[3], &[0.5, -1., 2.]));
        let y = g.layer_norm(x, zero, b, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1., 2., 0.5, -1., 2.]);
        let bad = g.constant(Tensor::ones(vec![4]));
        assert!(g.layer_norm(x, bad, b, 1e-5).is_err());
    }

    #[test]
    fn reductions_and_their_grads() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 2], &[1., 3., 3., 5.]), true);
        let m = g.mean_axis(x, 0).unwrap();
        assert_eq!(g.value(m).data(), &[2., 4.]);
        let s = g.sum_all(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.; 4]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[4], &[1., 3., 3., 5.]), true);
        let m = g.mean_all(x).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn l1_values_and_mask() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(t(&[2], &[1., 2.]));
        let z = g.constant(t(&[2], &[0., 0.]));
        let l = g.l1_loss(p, z, None).unwrap();
        assert_eq!(g.value(l).data(), &[1.5]);
        let l = g.l1_loss(p, p, None).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
        let mask = t(&[2], &[0., 0.]);
        assert!(matches!(g.l1_loss(p, z, Some(&mask)), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn l1_masked_equals_kept_frames() {
        let mut g = Graph::<f64>::new();
        let pred = t(&[4, 2], &[1., -2., 0.5, 3., 7., 7., -1., 0.]);
        let tgt = t(&[4, 2], &[0., 0., 1., 1., 2., 2., 0., 0.5]);
        let p = g.constant(pred.clone());
        let q = g.constant(tgt.clone());
        let mask = t(&[4, 1], &[1., 0., 1., 0.]);
        let masked = g.l1_loss(p, q, Some(&mask)).unwrap();
        // Oracle: recompute on frames 0 and 2 only.
        let kept: f64 = [0usize, 2]
            .iter()
            .flat_map(|&r| (0..2).map(move |c| (r, c)))
            .map(|(r, c)| (pred.get(&[r, c]) - tgt.get(&[r, c])).abs())
            .sum::<f64>()
            / 4.0;
        assert!((g.value(masked).data()[0] - kept).abs() < 1e-15);
    }

    #[test]
    fn bce_reference_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::scalar(0.0));
        let l = g.bce_with_logits(x, &Tensor::scalar(1.0), 1.0, None).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let x = g.constant(Tensor::scalar(20.0));
        let l = g.bce_with_logits(x, &Tensor::scalar(1.0), 1.0, None).unwrap();
        assert!(g.value(l).data()[0] < 1e-8);
    }

    #[test]
    fn bce_pos_weight_scales_positive_term() {
        let logits = t(&[4], &[0.3, -1.2, 2.0, 0.7]);
        let targets = t(&[4], &[1., 0., 1., 0.]);
        let mut g = Graph::<f64>::new();
        let x = g.constant(logits.clone());
        let w1 = g.bce_with_logits(x, &targets, 1.0, None).unwrap();
        let w6 = g.bce_with_logits(x, &targets, 6.0, None).unwrap();
        // Oracle: recompute the two terms independently.
        let sp = |v: f64| (1.0 + v.exp()).ln();
        let pos: f64 = [0usize, 2].iter().map(|&i| sp(-logits.data()[i])).sum::<f64>() / 4.0;
        let neg: f64 = [1usize, 3].iter().map(|&i| sp(logits.data()[i])).sum::<f64>() / 4.0;
        assert!((g.value(w1).data()[0] - (pos + neg)).abs() < 1e-12);
        assert!((g.value(w6).data()[0] - (6.0 * pos + neg)).abs() < 1e-12);
    }

    #[test]
    fn pool_window_counts() {
        assert_eq!(pool_windows(32, 8, 4).len(), 7);
        assert_eq!(pool_windows(64, 8, 4).len(), 15);
        assert_eq!(pool_windows(5, 8, 4), vec![(0, 5)]);
        assert_eq!(pool_windows(8, 8, 4), vec![(0, 8)]);
    }

    #[test]
    fn unfold_causal_shifts_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3, 1], &[1., 2., 3.]));
        let u = g.unfold_causal(x, 2).unwrap();
        assert_eq!(g.value(u).data(), &[0., 1., 1., 2., 2., 3.]);
    }

    #[test]
    fn no_grad_graph_records_no_ops() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::no_grad(&store);
        let x = g.leaf(Tensor::scalar(1.0), true);
        assert!(!g.requires_grad(x));
    }
}
