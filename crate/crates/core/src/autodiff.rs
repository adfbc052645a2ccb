//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every op appends a node to the [`Tape`]; node indices are therefore a
//! topological order and the recorded graph is acyclic by construction.
//! [`Tape::backward`] walks the nodes once, in reverse index order.
//!
//! Ops that need a hand-written backward rule (the straight-through
//! quantizer) plug in through [`CustomOp`].

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule supplied by code outside this module.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;

    /// Gradient for each input given the upstream gradient of the output.
    /// `needs[i]` is false when input `i` does not require a gradient; the
    /// rule may return `None` for those.
    fn backward(
        &self,
        upstream: &[f64],
        inputs: &[&Tensor],
        output: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

#[derive(Debug)]
enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    /// `[.., n] + [n]`
    AddBias(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, f64),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
    Reshape(Var),
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomOp>,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add",
            Op::Mul(..) => "mul",
            Op::MulScalar(..) => "mul_scalar",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Relu(..) => "relu",
            Op::Clamp { .. } => "clamp",
            Op::Reshape(..) => "flatten",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Conv2d { .. } => "conv2d",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Custom { rule, .. } => rule.name(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Static geometry of a 2-D convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients produced by one [`Tape::backward`] call.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Vec<f64>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of a leaf created with `requires_grad`.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.leaves.get(&var).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    /// Adds the parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.params {
            store.accumulate_grad(*id, g);
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, grad: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, g) in acc.iter_mut().zip(&grad) {
                *a += g;
            }
        }
        None => *slot = Some(grad),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn op_kind(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.kind()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf { param: None }, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf holding a copy of a stored parameter. Inserting the same
    /// parameter twice returns the existing node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = store.get(id).tensor.clone();
        let var = self.push(value, Op::Leaf { param: Some(id) }, true);
        self.param_vars.insert(id, var);
        var
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Element-wise sum of equal shapes, or `[.., n] + [n]` bias broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
            let value = Tensor::new(sa.to_vec(), data)?;
            let rg = self.rg(a) || self.rg(b);
            return Ok(self.push(value, Op::Add(a, b), rg));
        }
        if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            let n = sb[0];
            let bias = self.value(b).data();
            let data: Vec<f64> = self
                .value(a)
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + bias[i % n])
                .collect();
            let value = Tensor::new(sa.to_vec(), data)?;
            let rg = self.rg(a) || self.rg(b);
            return Ok(self.push(value, Op::AddBias(a, b), rg));
        }
        Err(Error::Shape {
            op: "add",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op: "mul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(sa.to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::MulScalar(a, s), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&x| x.max(0.0)).collect(),
        )
        .expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// Clamps into `[lo, hi]`. The gradient passes in the interior, and at a
    /// bound only in the direction that a descent step would move back
    /// inside (so the bound cannot be pushed through).
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&x| x.clamp(lo, hi)).collect(),
        )
        .expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Clamp { input: a, lo, hi }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let lead = t.shape()[0];
        let rest = t.len() / lead;
        let value = t.reshape(vec![lead, rest])?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Non-overlapping `k×k` max pooling over NCHW input. Ties go to the
    /// first element in row-major order.
    pub fn maxpool2d(&mut self, a: Var, k: usize) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
            return Err(Error::Shape {
                op: "maxpool2d",
                lhs: s.to_vec(),
                rhs: vec![k, k],
            });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let x = t.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * k * w + j * k;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = base + (i * k + di) * w + j * k + dj;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::MaxPool2d { input: a, argmax }, rg))
    }

    /// 2-D convolution. `input` is `[B, C, H, W]`, `weight` is
    /// `[O, C, kh, kw]`, `bias` is `[O]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (si, sw) = (self.value(input).shape(), self.value(weight).shape());
        let mismatch = || Error::Shape {
            op: "conv2d",
            lhs: si.to_vec(),
            rhs: sw.to_vec(),
        };
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] || stride == 0 {
            return Err(mismatch());
        }
        if si[2] + 2 * padding < sw[2] || si[3] + 2 * padding < sw[3] {
            return Err(mismatch());
        }
        let geom = ConvGeom {
            batch: si[0],
            in_channels: si[1],
            height: si[2],
            width: si[3],
            out_channels: sw[0],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            padding,
        };
        if let Some(b) = bias {
            let sb = self.value(b).shape();
            if sb != [geom.out_channels] {
                return Err(Error::Shape {
                    op: "conv2d",
                    lhs: sw.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
        }
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let plane = oh * ow;
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut out = vec![0.0; geom.batch * geom.out_channels * plane];
        let mut cols = vec![0.0; geom.patch() * plane];
        let in_sample = geom.in_channels * geom.height * geom.width;
        for n in 0..geom.batch {
            im2col(&x[n * in_sample..(n + 1) * in_sample], &geom, &mut cols);
            let o = matmul_kernel(w, &cols, geom.out_channels, geom.patch(), plane);
            out[n * geom.out_channels * plane..(n + 1) * geom.out_channels * plane]
                .copy_from_slice(&o);
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (i, v) in out.iter_mut().enumerate() {
                *v += bv[(i / plane) % geom.out_channels];
            }
        }
        let value = Tensor::new(vec![geom.batch, geom.out_channels, oh, ow], out)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let s = t.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let x = t.data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &x[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * k + j] = e;
                denom += e;
            }
            for p in &mut probs[r * k..(r + 1) * k] {
                *p /= denom;
            }
            loss += denom.ln() + max - row[labels[r]];
        }
        let value = Tensor::scalar(loss / b as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, rule: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            rg,
        )
    }

    /// Backpropagates from a scalar `loss`. Each node is visited at most
    /// once, in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let send = |v: Var, grad: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut grads[v.0], grad);
                }
            };
            match &node.op {
                Op::Leaf { param } => match param {
                    Some(id) => out.params.push((*id, g)),
                    None => {
                        out.leaves.insert(Var(i), g);
                    }
                },
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if self.rg(*a) {
                        send(*a, matmul_a_bt(&g, tb.data(), m, n, k), &mut grads);
                    }
                    if self.rg(*b) {
                        send(*b, matmul_at_b(ta.data(), &g, m, k, n), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        send(*b, g.clone(), &mut grads);
                    }
                    send(*a, g, &mut grads);
                }
                Op::AddBias(a, b) => {
                    if self.rg(*b) {
                        let n = self.value(*b).len();
                        let mut gb = vec![0.0; n];
                        for (j, v) in g.iter().enumerate() {
                            gb[j % n] += v;
                        }
                        send(*b, gb, &mut grads);
                    }
                    send(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        send(
                            *a,
                            zip_map(&g, self.value(*b).data(), |x, y| x * y),
                            &mut grads,
                        );
                    }
                    if self.rg(*b) {
                        send(
                            *b,
                            zip_map(&g, self.value(*a).data(), |x, y| x * y),
                            &mut grads,
                        );
                    }
                }
                Op::MulScalar(a, s) => {
                    send(*a, g.iter().map(|x| x * s).collect(), &mut grads);
                }
                Op::Sum(a) => {
                    send(*a, vec![g[0]; self.value(*a).len()], &mut grads);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    send(*a, vec![g[0] / n as f64; n], &mut grads);
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    let gx = g
                        .iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect();
                    send(*a, gx, &mut grads);
                }
                Op::Clamp { input, lo, hi } => {
                    let x = self.value(*input).data();
                    let gx = g
                        .iter()
                        .zip(x)
                        .map(|(&gi, &xi)| {
                            let blocked = (xi <= *lo && gi > 0.0) || (xi >= *hi && gi < 0.0);
                            if blocked {
                                0.0
                            } else {
                                gi
                            }
                        })
                        .collect();
                    send(*input, gx, &mut grads);
                }
                Op::Reshape(a) => send(*a, g, &mut grads),
                Op::MaxPool2d { input, argmax } => {
                    let mut gx = vec![0.0; self.value(*input).len()];
                    for (gi, &src) in g.iter().zip(argmax) {
                        gx[src] += gi;
                    }
                    send(*input, gx, &mut grads);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let (gx, gw, gb) = conv2d_backward(
                        &g,
                        self.value(*input).data(),
                        self.value(*weight).data(),
                        geom,
                        self.rg(*input),
                        self.rg(*weight),
                    );
                    if let Some(gx) = gx {
                        send(*input, gx, &mut grads);
                    }
                    if let Some(gw) = gw {
                        send(*weight, gw, &mut grads);
                    }
                    if let Some(b) = bias {
                        if self.rg(*b) {
                            send(*b, gb, &mut grads);
                        }
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let k = probs.len() / labels.len();
                    let scale = g[0] / labels.len() as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        gl[r * k + l] -= scale;
                    }
                    send(*logits, gl, &mut grads);
                }
                Op::Custom { inputs, rule } => {
                    let tensors: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    let needs: Vec<bool> = inputs.iter().map(|&v| self.rg(v)).collect();
                    let gs = rule.backward(&g, &tensors, &node.value, &needs);
                    for ((&v, gi), need) in inputs.iter().zip(gs).zip(&needs) {
                        if let (Some(gi), true) = (gi, need) {
                            send(v, gi, &mut grads);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// [`Tape::backward`] followed by accumulation into the parameter store.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(store);
        Ok(grads)
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// `[m,k] x [k,n]`, fixed i-k-j accumulation order.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `A[m,n] x B[k,n]^T -> [m,k]`
fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            c[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `A[m,k]^T x B[m,n] -> [k,n]`
fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for i in 0..oh {
                    let ih = (i * g.stride + ki) as isize - g.padding as isize;
                    for j in 0..ow {
                        let iw = (j * g.stride + kj) as isize - g.padding as isize;
                        dst[i * ow + j] = if ih >= 0
                            && iw >= 0
                            && (ih as usize) < g.height
                            && (iw as usize) < g.width
                        {
                            x[(c * g.height + ih as usize) * g.width + iw as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for i in 0..oh {
                    let ih = (i * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih as usize >= g.height {
                        continue;
                    }
                    for j in 0..ow {
                        let iw = (j * g.stride + kj) as isize - g.padding as isize;
                        if iw < 0 || iw as usize >= g.width {
                            continue;
                        }
                        dx[(c * g.height + ih as usize) * g.width + iw as usize] += src[i * ow + j];
                    }
                }
            }
        }
    }
}

type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>);

fn conv2d_backward(
    g: &[f64],
    x: &[f64],
    w: &[f64],
    geom: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> ConvGrads {
    let plane = geom.out_h() * geom.out_w();
    let patch = geom.patch();
    let oc = geom.out_channels;
    let in_sample = geom.in_channels * geom.height * geom.width;
    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    let mut gw = need_w.then(|| vec![0.0; w.len()]);
    let mut gb = vec![0.0; oc];
    let mut cols = vec![0.0; patch * plane];
    for n in 0..geom.batch {
        let gout = &g[n * oc * plane..(n + 1) * oc * plane];
        for (o, chunk) in gout.chunks(plane).enumerate() {
            gb[o] += chunk.iter().sum::<f64>();
        }
        if let Some(gw) = &mut gw {
            im2col(&x[n * in_sample..(n + 1) * in_sample], geom, &mut cols);
            let d = matmul_a_bt(gout, &cols, oc, plane, patch);
            for (a, b) in gw.iter_mut().zip(&d) {
                *a += b;
            }
        }
        if let Some(gx) = &mut gx {
            let dcols = matmul_at_b(w, gout, oc, patch, plane);
            col2im(&dcols, geom, &mut gx[n * in_sample..(n + 1) * in_sample]);
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 1], &[1., 1.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3., 7.]);
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1., 0., 2.]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0., 0., 2.]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.3, -2., 5.]), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1., 1., 1.]);
    }

    #[test]
    fn mean_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1., 2.]), true);
        let sq = tape.mul(x, x).unwrap();
        let m = tape.mean(sq);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1., 2.]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1., 2.]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParamStore::new();
        let id = store
            .add(
                "w",
                Tensor::from_vec(vec![1., 2.]),
                crate::params::ParamKind::Weight,
            )
            .unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let s = tape.sum(w);
        tape.backward_into(s, &mut store).unwrap();
        tape.backward_into(s, &mut store).unwrap();
        assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[2., 2.]);
    }

    #[test]
    fn maxpool_tie_goes_to_first_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[3., 3., 3., 3.]), true);
        let p = tape.maxpool2d(x, 2).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn clamp_blocks_only_outward_descent() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 1.0, 3.0, 16.0]), true);
        let c = tape.clamp(x, 1.0, 16.0);
        let w = tape.constant(Tensor::from_vec(vec![1.0, -1.0, 1.0, -1.0]));
        let y = tape.mul(c, w).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, -1.0, 1.0, 0.0]);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x: Vec<f64> = (0..2 * 2 * 4 * 4)
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        let w: Vec<f64> = (0..3 * 2 * 3 * 3)
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut tape = Tape::new();
        let xv = tape.constant(t(&[2, 2, 4, 4], &x));
        let wv = tape.constant(t(&[3, 2, 3, 3], &w));
        let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3, 4, 4]);
        let out = tape.value(y).data();
        for n in 0..2 {
            for o in 0..3 {
                for i in 0..4isize {
                    for j in 0..4isize {
                        let mut acc = 0.0;
                        for c in 0..2 {
                            for ki in 0..3isize {
                                for kj in 0..3isize {
                                    let (ih, iw) = (i + ki - 1, j + kj - 1);
                                    if (0..4).contains(&ih) && (0..4).contains(&iw) {
                                        acc += x[((n * 2 + c) * 4 + ih as usize) * 4 + iw as usize]
                                            * w[((o * 2 + c) * 3 + ki as usize) * 3 + kj as usize];
                                    }
                                }
                            }
                        }
                        let got = out[((n * 3 + o) * 4 + i as usize) * 4 + j as usize];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.softmax_cross_entropy(l, &[0, 3]).is_err());
        assert!(tape.softmax_cross_entropy(l, &[0]).is_err());
        let ce = tape.softmax_cross_entropy(l, &[0, 2]).unwrap();
        assert!((tape.value(ce).item() - 3f64.ln()).abs() < 1e-15);
    }
}
