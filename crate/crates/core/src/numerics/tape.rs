//! Append-only computation tape with reverse-mode differentiation.
//!
//! One tape records one forward pass. [`Tape::backward`] walks it in
//! reverse once; afterwards the recorded ops are dropped and a second call
//! is rejected. Values stay readable.

use std::sync::Arc;

use super::conv::{self, Geometry};
use super::tensor::{matmul_raw, transpose_raw};
use super::Tensor;
use crate::attention::{self, KernelFeatureMap, KernelKind, DENOM_EPS};
use crate::{Error, ExecMode, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    MulBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    RmsNorm(Var, f64),
    Conv3d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose3d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Favor(Var, Arc<KernelFeatureMap>),
    CausalLinear {
        phi_q: Var,
        phi_k: Var,
        v: Var,
        seq_len: usize,
    },
    CausalExact {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        kernel: KernelKind,
    },
    BceMean {
        pred: Var,
        target: Tensor,
        eps: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    exec: ExecMode,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = a.data().iter().map(|&x| f(x)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// `(outer, channels, inner)` for broadcasting a `[channels]` vector along axis 1.
fn bias_layout(x: &Tensor, b: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() < 2 || b.shape() != [s[1]] {
        return Err(Error::shape(op, format!("x {:?} with bias {:?}", s, b.shape())));
    }
    Ok((s[0], s[1], s[2..].iter().product()))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn block_rows(t: &Tensor, start: usize, len: usize) -> Tensor {
    let c = t.shape()[1];
    Tensor::new(vec![len, c], t.data()[start * c..(start + len) * c].to_vec()).expect("block")
}

impl Tape {
    pub fn new() -> Self {
        Self::with_exec(ExecMode::default())
    }

    pub fn with_exec(exec: ExecMode) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
            consumed: false,
        }
    }

    pub fn exec(&self) -> ExecMode {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let y = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let y = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(y, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let y = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.value(a), self.value(b))?;
        let y = zip_map(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.push(y, Op::Div(a, b), &[a, b]))
    }

    /// `x + b` with `b [C]` broadcast along axis 1 of `x [N, C, ...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (outer, ch, inner) = bias_layout(self.value(x), self.value(b), "add_bias")?;
        let mut y = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for o in 0..outer {
            for (c, bc) in bv.iter().enumerate().take(ch) {
                let start = (o * ch + c) * inner;
                for v in &mut y.data_mut()[start..start + inner] {
                    *v += bc;
                }
            }
        }
        Ok(self.push(y, Op::AddBias(x, b), &[x, b]))
    }

    /// `x * b` with `b [C]` broadcast along axis 1.
    pub fn mul_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (outer, ch, inner) = bias_layout(self.value(x), self.value(b), "mul_bias")?;
        let mut y = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for o in 0..outer {
            for (c, bc) in bv.iter().enumerate().take(ch) {
                let start = (o * ch + c) * inner;
                for v in &mut y.data_mut()[start..start + inner] {
                    *v *= bc;
                }
            }
        }
        Ok(self.push(y, Op::MulBias(x, b), &[x, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = map(self.value(x), |v| v * c);
        self.push(y, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let y = map(self.value(x), |v| v + c);
        self.push(y, Op::AddScalar(x), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (k2, m) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let y = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        let y = Tensor::new(vec![n, m], y)?;
        Ok(self.push(y, Op::MatMul(a, b), &[a, b]))
    }

    /// `x W + b` for `x [N, in]`, `W [in, out]`, `b [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = map(self.value(x), |v| v.max(0.0));
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = map(self.value(x), sigmoid);
        self.push(y, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = map(self.value(x), f64::tanh);
        self.push(y, Op::Tanh(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = map(self.value(x), f64::exp);
        self.push(y, Op::Exp(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(y, Op::Mean(x), &[x])
    }

    /// Row-wise `x / sqrt(mean(x^2) + eps)` for `x [N, d]`.
    pub fn rms_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let mut y = self.value(x).clone();
        for row in y.data_mut().chunks_mut(d).take(n) {
            let r = (row.iter().map(|v| v * v).sum::<f64>() / d as f64 + eps).sqrt();
            for v in row {
                *v /= r;
            }
        }
        Ok(self.push(y, Op::RmsNorm(x, eps), &[x]))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = conv::conv3d(self.value(x), self.value(w), stride, pad, self.exec)?;
        Ok(self.push(y, Op::Conv3d { x, w, stride, pad }, &[x, w]))
    }

    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let y = conv::conv_transpose3d(self.value(x), self.value(w), stride, pad, out_pad, self.exec)?;
        Ok(self.push(
            y,
            Op::ConvTranspose3d {
                x,
                w,
                stride,
                pad,
                out_pad,
            },
            &[x, w],
        ))
    }

    /// Rows `idx` of a 2D tensor, in that order (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("indices {idx:?} for {n} rows")));
        }
        let src = self.value(x).data();
        let data: Vec<f64> = idx.iter().flat_map(|&i| src[i * c..(i + 1) * c].iter().copied()).collect();
        let y = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(y, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(*parts.first().ok_or(Error::EmptySequence)?).dims2()?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.value(p).dims2()?;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("column counts {c} vs {pc}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let y = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(y, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..start+len` of a 2D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", format!("{start}..{} of {c}", start + len)));
        }
        let src = self.value(x).data();
        let data: Vec<f64> = (0..n).flat_map(|i| src[i * c + start..i * c + start + len].iter().copied()).collect();
        let y = Tensor::new(vec![n, len], data)?;
        Ok(self.push(y, Op::SliceCols(x, start), &[x]))
    }

    /// FAVOR+ features of every row of `x [N, d_qk]`.
    pub fn favor_features(&mut self, x: Var, map: Arc<KernelFeatureMap>) -> Result<Var> {
        if map.kind() != KernelKind::Softmax {
            return Err(Error::InvalidArgument("favor_features needs a softmax map".into()));
        }
        let y = map.apply_rows(self.value(x))?;
        Ok(self.push(y, Op::Favor(x, map), &[x]))
    }

    /// Causal linear attention applied independently to consecutive
    /// blocks of `seq_len` rows.
    pub fn causal_linear_attention(&mut self, phi_q: Var, phi_k: Var, v: Var, seq_len: usize) -> Result<Var> {
        let n = self.value(v).dims2()?.0;
        if seq_len == 0 || n % seq_len != 0 {
            return Err(Error::shape("causal_linear_attention", format!("{n} rows in blocks of {seq_len}")));
        }
        let mut parts = Vec::new();
        for start in (0..n).step_by(seq_len) {
            let out = attention::causal_linear_attention_features(
                &block_rows(self.value(phi_q), start, seq_len),
                &block_rows(self.value(phi_k), start, seq_len),
                &block_rows(self.value(v), start, seq_len),
            )?;
            parts.extend(out.into_data());
        }
        let d = self.value(v).shape()[1];
        let y = Tensor::new(vec![n, d], parts)?;
        Ok(self.push(
            y,
            Op::CausalLinear {
                phi_q,
                phi_k,
                v,
                seq_len,
            },
            &[phi_q, phi_k, v],
        ))
    }

    /// Exact (quadratic) causal attention over blocks of `seq_len` rows.
    pub fn causal_exact_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        kernel: KernelKind,
    ) -> Result<Var> {
        let n = self.value(v).dims2()?.0;
        if seq_len == 0 || n % seq_len != 0 {
            return Err(Error::shape("causal_exact_attention", format!("{n} rows in blocks of {seq_len}")));
        }
        let mut parts = Vec::new();
        for start in (0..n).step_by(seq_len) {
            let out = attention::exact_causal_attention(
                &block_rows(self.value(q), start, seq_len),
                &block_rows(self.value(k), start, seq_len),
                &block_rows(self.value(v), start, seq_len),
                kernel,
            )?;
            parts.extend(out.into_data());
        }
        let d = self.value(v).shape()[1];
        let y = Tensor::new(vec![n, d], parts)?;
        Ok(self.push(
            y,
            Op::CausalExact {
                q,
                k,
                v,
                seq_len,
                kernel,
            },
            &[q, k, v],
        ))
    }

    /// Mean binary cross-entropy with predictions clamped to `[eps, 1-eps]`.
    pub fn bce_mean(&mut self, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
        same_shape("bce_mean", self.value(pred), target)?;
        if target.data().iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidArgument("BCE targets must lie in [0, 1]".into()));
        }
        let p = self.value(pred).data();
        let n = p.len() as f64;
        let loss = p
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.clamp(eps, 1.0 - eps);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceMean {
                pred,
                target: target.clone(),
                eps,
            },
            &[pred],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            // Interior gradients are consumed here; only leaves keep theirs.
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
        }
        for node in &mut self.nodes {
            node.op = Op::Leaf;
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, map(g, |v| -v));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, zip_map(g, self.value(*b), |g, y| g * y));
                acc(grads, *b, zip_map(g, self.value(*a), |g, x| g * x));
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(grads, *a, zip_map(g, vb, |g, y| g / y));
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(va.data().iter().zip(vb.data()))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                acc(grads, *b, Tensor::new(vb.shape().to_vec(), gb)?);
            }
            Op::AddBias(x, b) => {
                acc(grads, *x, g.clone());
                if wants(*b) {
                    let (outer, ch, inner) = bias_layout(g, self.value(*b), "add_bias")?;
                    let mut gb = vec![0.0; ch];
                    for o in 0..outer {
                        for (c, s) in gb.iter_mut().enumerate() {
                            let start = (o * ch + c) * inner;
                            *s += g.data()[start..start + inner].iter().sum::<f64>();
                        }
                    }
                    acc(grads, *b, Tensor::new(vec![ch], gb)?);
                }
            }
            Op::MulBias(x, b) => {
                let (outer, ch, inner) = bias_layout(g, self.value(*b), "mul_bias")?;
                let bv = self.value(*b).data();
                let xv = self.value(*x).data();
                let mut gx = g.clone();
                let mut gb = vec![0.0; ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let start = (o * ch + c) * inner;
                        for j in start..start + inner {
                            gb[c] += g.data()[j] * xv[j];
                            gx.data_mut()[j] *= bv[c];
                        }
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *b, Tensor::new(vec![ch], gb)?);
            }
            Op::Scale(x, c) => acc(grads, *x, map(g, |v| v * c)),
            Op::AddScalar(x) => acc(grads, *x, g.clone()),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k) = va.dims2()?;
                let m = vb.dims2()?.1;
                if wants(*a) {
                    let bt = transpose_raw(vb.data(), k, m);
                    acc(grads, *a, Tensor::new(vec![n, k], matmul_raw(g.data(), &bt, n, m, k))?);
                }
                if wants(*b) {
                    let at = transpose_raw(va.data(), n, k);
                    acc(grads, *b, Tensor::new(vec![k, m], matmul_raw(&at, g.data(), k, n, m))?);
                }
            }
            Op::Relu(x) => acc(grads, *x, zip_map(g, self.value(*x), |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::Sigmoid(x) => acc(grads, *x, zip_map(g, y, |g, s| g * s * (1.0 - s))),
            Op::Tanh(x) => acc(grads, *x, zip_map(g, y, |g, t| g * (1.0 - t * t))),
            Op::Exp(x) => acc(grads, *x, zip_map(g, y, |g, e| g * e)),
            Op::Reshape(x) => acc(grads, *x, g.clone().reshape(self.value(*x).shape())?),
            Op::Sum(x) => acc(grads, *x, Tensor::full(self.value(*x).shape(), g.data()[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(grads, *x, Tensor::full(self.value(*x).shape(), g.data()[0] / n))
            }
            Op::RmsNorm(x, eps) => {
                let xv = self.value(*x);
                let (_, d) = xv.dims2()?;
                let mut gx = vec![0.0; xv.len()];
                for ((gr, (xr, yr)), out) in g
                    .data()
                    .chunks(d)
                    .zip(xv.data().chunks(d).zip(y.data().chunks(d)))
                    .zip(gx.chunks_mut(d))
                {
                    let r = (xr.iter().map(|v| v * v).sum::<f64>() / d as f64 + eps).sqrt();
                    let proj = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        out[j] = (gr[j] - yr[j] * proj) / r;
                    }
                }
                acc(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
            Op::Conv3d { x, w, stride, pad } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let geo: Geometry = conv::conv_geometry(xv, wv, *stride, *pad)?;
                if wants(*x) {
                    let gx = conv::scatter_big(g.data(), wv.data(), &geo, self.exec);
                    acc(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                }
                if wants(*w) {
                    let gw = conv::weight_grad(xv.data(), g.data(), &geo, self.exec);
                    acc(grads, *w, Tensor::new(wv.shape().to_vec(), gw)?);
                }
            }
            Op::ConvTranspose3d {
                x,
                w,
                stride,
                pad,
                out_pad,
            } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let geo = conv::conv_transpose_geometry(xv, wv, *stride, *pad, *out_pad)?;
                if wants(*x) {
                    let gx = conv::gather_small(g.data(), wv.data(), &geo, self.exec);
                    acc(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                }
                if wants(*w) {
                    let gw = conv::weight_grad(g.data(), xv.data(), &geo, self.exec);
                    acc(grads, *w, Tensor::new(wv.shape().to_vec(), gw)?);
                }
            }
            Op::GatherRows(x, idx) => {
                let xv = self.value(*x);
                let c = xv.shape()[1];
                let mut gx = Tensor::zeros(xv.shape());
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut gx.data_mut()[src * c..(src + 1) * c];
                    for (d, s) in dst.iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                        *d += s;
                    }
                }
                acc(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let part = Tensor::new(self.value(p).shape().to_vec(), g.data()[offset..offset + n].to_vec())?;
                    acc(grads, p, part);
                    offset += n;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let (n, c) = xv.dims2()?;
                let len = g.shape()[1];
                let mut gx = Tensor::zeros(xv.shape());
                for r in 0..n {
                    gx.data_mut()[r * c + start..r * c + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                acc(grads, *x, gx);
            }
            Op::Favor(x, fmap) => {
                let xv = self.value(*x);
                let (n, dqk) = xv.dims2()?;
                let m = fmap.feature_count();
                let mut gx = vec![0.0; n * dqk];
                for r in 0..n {
                    let xr = xv.row(r);
                    let out = &mut gx[r * dqk..(r + 1) * dqk];
                    for f in 0..m {
                        let coeff = g.data()[r * m + f] * y.data()[r * m + f];
                        if coeff == 0.0 {
                            continue;
                        }
                        for ((o, w), xx) in out.iter_mut().zip(fmap.omega(f)).zip(xr) {
                            *o += coeff * (w - xx);
                        }
                    }
                }
                acc(grads, *x, Tensor::new(vec![n, dqk], gx)?);
            }
            Op::CausalLinear {
                phi_q,
                phi_k,
                v,
                seq_len,
            } => {
                let (gq, gk, gv) = causal_linear_backward(
                    self.value(*phi_q),
                    self.value(*phi_k),
                    self.value(*v),
                    y,
                    g,
                    *seq_len,
                )?;
                acc(grads, *phi_q, gq);
                acc(grads, *phi_k, gk);
                acc(grads, *v, gv);
            }
            Op::CausalExact {
                q,
                k,
                v,
                seq_len,
                kernel,
            } => {
                let (gq, gk, gv) =
                    causal_exact_backward(self.value(*q), self.value(*k), self.value(*v), y, g, *seq_len, *kernel)?;
                acc(grads, *q, gq);
                acc(grads, *k, gk);
                acc(grads, *v, gv);
            }
            Op::BceMean { pred, target, eps } => {
                let p = self.value(*pred);
                let n = p.len() as f64;
                let scale = g.data()[0] / n;
                let gp = zip_map(p, target, |p, t| {
                    if p > *eps && p < 1.0 - eps {
                        scale * (p - t) / (p * (1.0 - p))
                    } else {
                        0.0
                    }
                });
                acc(grads, *pred, gp);
            }
        }
        Ok(())
    }
}

type Triple = (Tensor, Tensor, Tensor);

fn causal_linear_backward(
    phi_q: &Tensor,
    phi_k: &Tensor,
    v: &Tensor,
    out: &Tensor,
    g: &Tensor,
    seq_len: usize,
) -> Result<Triple> {
    let (n, m) = phi_q.dims2()?;
    let d = v.dims2()?.1;
    let mut gq = vec![0.0; n * m];
    let mut gk = vec![0.0; n * m];
    let mut gv = vec![0.0; n * d];
    for start in (0..n).step_by(seq_len) {
        // Forward prefix sums, one snapshot per row.
        let mut s = vec![0.0; m * d];
        let mut z = vec![0.0; m];
        let mut snaps = Vec::with_capacity(seq_len);
        let mut dens = Vec::with_capacity(seq_len);
        for i in start..start + seq_len {
            let (pk, vi) = (phi_k.row(i), v.row(i));
            for a in 0..m {
                z[a] += pk[a];
                for c in 0..d {
                    s[a * d + c] += pk[a] * vi[c];
                }
            }
            dens.push(attention::dot(phi_q.row(i), &z));
            snaps.push((s.clone(), z.clone()));
        }
        let mut r_mat = vec![0.0; m * d];
        let mut r_vec = vec![0.0; m];
        for i in (start..start + seq_len).rev() {
            let li = i - start;
            let den = dens[li];
            let gi = g.row(i);
            let pq = phi_q.row(i);
            if den == 0.0 {
                for c in 0..d {
                    gv[i * d + c] += gi[c];
                }
            } else {
                let den_c = den.max(DENOM_EPS);
                let dnum: Vec<f64> = gi.iter().map(|x| x / den_c).collect();
                let dden = if den >= DENOM_EPS {
                    -attention::dot(gi, out.row(i)) / den_c
                } else {
                    0.0
                };
                let (si, zi) = &snaps[li];
                for a in 0..m {
                    let mut acc = dden * zi[a];
                    for c in 0..d {
                        acc += si[a * d + c] * dnum[c];
                    }
                    gq[i * m + a] += acc;
                    for c in 0..d {
                        r_mat[a * d + c] += pq[a] * dnum[c];
                    }
                    r_vec[a] += dden * pq[a];
                }
            }
            let (pk, vi) = (phi_k.row(i), v.row(i));
            for a in 0..m {
                let mut acc = r_vec[a];
                for c in 0..d {
                    acc += r_mat[a * d + c] * vi[c];
                    gv[i * d + c] += r_mat[a * d + c] * pk[a];
                }
                gk[i * m + a] += acc;
            }
        }
    }
    Ok((
        Tensor::new(vec![n, m], gq)?,
        Tensor::new(vec![n, m], gk)?,
        Tensor::new(vec![n, d], gv)?,
    ))
}

fn causal_exact_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    out: &Tensor,
    g: &Tensor,
    seq_len: usize,
    kernel: KernelKind,
) -> Result<Triple> {
    let (n, dqk) = q.dims2()?;
    let d = v.dims2()?.1;
    let mut gq = vec![0.0; n * dqk];
    let mut gk = vec![0.0; n * dqk];
    let mut gv = vec![0.0; n * d];
    for start in (0..n).step_by(seq_len) {
        for i in start..start + seq_len {
            let (qi, gi, oi) = (q.row(i), g.row(i), out.row(i));
            let keys = start..=i;
            let weights: Vec<f64> = match kernel {
                KernelKind::Softmax => {
                    let sc: Vec<f64> = keys.clone().map(|j| attention::dot(qi, k.row(j))).collect();
                    let mx = sc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    sc.into_iter().map(|s| (s - mx).exp()).collect()
                }
                KernelKind::Relu => keys.clone().map(|j| kernel.eval(qi, k.row(j))).collect(),
            };
            let total: f64 = weights.iter().sum();
            if total == 0.0 {
                for c in 0..d {
                    gv[i * d + c] += gi[c];
                }
                continue;
            }
            let g_out = attention::dot(gi, oi);
            for (w, j) in weights.iter().zip(keys) {
                let p = w / total;
                for c in 0..d {
                    gv[j * d + c] += p * gi[c];
                }
                let dv = attention::dot(gi, v.row(j)) - g_out;
                let kj = k.row(j);
                match kernel {
                    KernelKind::Softmax => {
                        let ds = p * dv;
                        for a in 0..dqk {
                            gq[i * dqk + a] += ds * kj[a];
                            gk[j * dqk + a] += ds * qi[a];
                        }
                    }
                    KernelKind::Relu => {
                        let dw = dv / total;
                        for a in 0..dqk {
                            if qi[a] > 0.0 {
                                gq[i * dqk + a] += dw * kj[a].max(0.0);
                            }
                            if kj[a] > 0.0 {
                                gk[j * dqk + a] += dw * qi[a].max(0.0);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![n, dqk], gq)?,
        Tensor::new(vec![n, dqk], gk)?,
        Tensor::new(vec![n, d], gv)?,
    ))
}

#[cfg(test)]
mod tests;
