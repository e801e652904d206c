//! Reverse-mode automatic differentiation on a recording tape.
//!
//! A [`Graph`] records every operation eagerly: values are computed when the
//! op is added, and [`Graph::backward`] walks the tape in reverse. Binary
//! elementwise ops accept a right-hand operand whose shape is a suffix of the
//! left-hand shape (bias rows, per-channel gains, scalars); its gradient is
//! summed over the broadcast leading axes.

use std::collections::HashMap;
use std::sync::Arc;

use crate::conv::{gemm, ConvGeom};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How straight-through sampling behaves in the forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SampleMode {
    /// Forward value is the discrete one-hot sample; the backward pass treats it as the probabilities.
    #[default]
    Straight,
    /// Forward value is the probabilities themselves. The straight-through
    /// backward rule is then the exact derivative, which makes the rest of
    /// the graph checkable against finite differences.
    Relaxed,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Elu,
    Tanh,
    Sigmoid,
    Exp,
    Ln,
    Softplus,
    Square,
    ClampMin(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    Shift(Var),
    Unary(Var, Unary),
    MatMul(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Vec<f64>),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    PassThrough(Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, stride: usize, pad: usize },
    RelGather(Var),
    ChannelBias(Var, Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<(u64, usize)>,
}

/// Parameters of one [`ParamSet`] bound as graph leaves.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Grads {
    params: HashMap<(u64, usize), Tensor>,
    leaves: HashMap<usize, Tensor>,
}

impl Grads {
    /// Gradient of one parameter, `None` when it did not influence the loss.
    pub fn param(&self, set: &ParamSet, id: ParamId) -> Option<&Tensor> {
        self.params.get(&(set.id(), id.index()))
    }

    /// Gradients for every array of `set`, zero-filled where absent.
    pub fn for_set(&self, set: &ParamSet) -> Vec<Tensor> {
        set.ids()
            .map(|id| self.param(set, id).cloned().unwrap_or_else(|| Tensor::zeros(set.get(id).shape().to_vec())))
            .collect()
    }

    /// Gradient with respect to an input leaf created by [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    mode: SampleMode,
}

fn suffix_of(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Sum `g` (shaped like the broadcast result) down to `shape`, a suffix of it.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    for (i, x) in g.data().iter().enumerate() {
        out[i % n] += x;
    }
    Tensor::new(shape.to_vec(), out)
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let nd = shape.len();
    assert_eq!(perm.len(), nd, "permutation rank mismatch");
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let src = t.data();
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(src[offset]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

fn transpose_last(t: &Tensor) -> Tensor {
    let nd = t.ndim();
    assert!(nd >= 2, "transpose needs rank >= 2");
    let mut perm: Vec<usize> = (0..nd).collect();
    perm.swap(nd - 1, nd - 2);
    permute_tensor(t, &perm)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_mode(mode: SampleMode) -> Self {
        Self { nodes: Vec::new(), mode }
    }

    pub fn mode(&self) -> SampleMode {
        self.mode
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// A leaf whose gradient is reported by [`Grads::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind every array of `set` as a leaf. Frozen sets bind as constants.
    pub fn bind(&mut self, set: &ParamSet) -> Bound {
        let vars = set
            .ids()
            .map(|id| {
                let v = self.push_shared(set.shared(id), Op::Leaf, set.requires_grad(id));
                self.nodes[v.0].param = Some((set.id(), id.index()));
                v
            })
            .collect();
        Bound { vars }
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = Arc::clone(&self.nodes[v.0].value);
        self.push_shared(t, Op::Leaf, false)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert!(
            suffix_of(bv.shape(), av.shape()),
            "operand shape {:?} does not broadcast onto {:?}",
            bv.shape(),
            av.shape()
        );
        let n = bv.numel().max(1);
        let bd = bv.data();
        let data = av.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % n])).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Div(a, b), rg)
    }

    /// Elementwise product with a constant whose shape is a suffix of `a`'s.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let av = &self.nodes[a.0].value;
        assert!(suffix_of(c.shape(), av.shape()), "mul_const shape mismatch");
        let n = c.numel().max(1);
        let data = av.data().iter().enumerate().map(|(i, &x)| x * c.data()[i % n]).collect();
        let t = Tensor::new(av.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(t, Op::MulConst(a, c), rg)
    }

    /// Add a constant whose shape is a suffix of `a`'s.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let av = &self.nodes[a.0].value;
        assert!(suffix_of(c.shape(), av.shape()), "add_const shape mismatch");
        let n = c.numel().max(1);
        let data = av.data().iter().enumerate().map(|(i, &x)| x + c.data()[i % n]).collect();
        let t = Tensor::new(av.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(t, Op::Shift(a), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.add_const(a, &Tensor::scalar(c))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.nodes[a.0].value.map(|x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    fn unary(&mut self, a: Var, u: Unary) -> Var {
        let f = |x: f64| match u {
            Unary::Relu => x.max(0.0),
            Unary::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Softplus => softplus(x),
            Unary::Square => x * x,
            Unary::ClampMin(m) => x.max(m),
        };
        let t = self.nodes[a.0].value.map(f);
        let rg = self.rg(a);
        self.push(t, Op::Unary(a, u), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Elu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// `max(a, m)`; gradient flows only where `a > m`.
    pub fn clamp_min(&mut self, a: Var, m: f64) -> Var {
        self.unary(a, Unary::ClampMin(m))
    }

    /// Batched matrix product. `a` is `[.., n, k]`; `b` is either `[.., k, m]`
    /// with the same leading dims or a plain `[k, m]` matrix shared by every batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let t = matmul_fwd(av, bv);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::MatMul(a, b), rg)
    }

    /// `x · w + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add(y, b),
            None => y,
        }
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Var {
        let t = transpose_last(&self.nodes[a.0].value);
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let t = permute_tensor(&self.nodes[a.0].value, perm);
        let rg = self.rg(a);
        self.push(t, Op::Permute(a, perm.to_vec()), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.nodes[a.0].value.as_ref().clone().reshape(shape.to_vec());
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let d = av.last_dim();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), out);
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let d = av.last_dim();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), out);
        let rg = self.rg(a);
        self.push(t, Op::LogSoftmax(a), rg)
    }

    /// Normalize the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let av = &self.nodes[a.0].value;
        let d = av.last_dim();
        let mut out = av.data().to_vec();
        let mut inv = Vec::with_capacity(out.len() / d.max(1));
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv.push(is);
        }
        let t = Tensor::new(av.shape().to_vec(), out);
        let rg = self.rg(a);
        self.push(t, Op::LayerNorm(a, inv), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.nodes[a.0].value.sum());
        let rg = self.rg(a);
        self.push(t, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let t = Tensor::scalar(av.sum() / av.numel() as f64);
        let rg = self.rg(a);
        self.push(t, Op::MeanAll(a), rg)
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let d = av.last_dim();
        let data = av.data().chunks(d).map(|r| r.iter().sum()).collect();
        let shape = av.shape()[..av.ndim().saturating_sub(1)].to_vec();
        let t = Tensor::new(shape, data);
        let rg = self.rg(a);
        self.push(t, Op::SumLast(a), rg)
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            assert!(
                s.len() == first.len() && s[..axis] == first[..axis] && s[axis + 1..] == first[axis + 1..],
                "concat shape mismatch: {s:?} vs {first:?}"
            );
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(shape, data), Op::Concat(parts.to_vec(), axis), rg)
    }

    /// Elements `start..start + len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let shape = av.shape();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&av.data()[o * full + start * inner..o * full + (start + len) * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let rg = self.rg(a);
        self.push(Tensor::new(out_shape, data), Op::Narrow(a, axis, start), rg)
    }

    /// Straight-through estimator: the forward value is `sample` (or the
    /// probabilities themselves in [`SampleMode::Relaxed`]); the backward pass
    /// routes the incoming gradient unchanged to `probs`.
    pub fn straight_through(&mut self, probs: Var, sample: Tensor) -> Var {
        let pv = &self.nodes[probs.0].value;
        assert_eq!(pv.shape(), sample.shape(), "straight-through sample shape mismatch");
        let t = match self.mode {
            SampleMode::Straight => sample,
            SampleMode::Relaxed => pv.as_ref().clone(),
        };
        let rg = self.rg(probs);
        self.push(t, Op::PassThrough(probs), rg)
    }

    /// 2D convolution, NCHW input `[n, c, h, w]`, weights `[o, c, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (n, c, h, wd) = dims4(xv);
        let (o, wc, k, _) = dims4(wv);
        assert_eq!(c, wc, "conv2d channel mismatch");
        let g = ConvGeom::new(c, h, wd, k, stride, pad);
        let mut out = vec![0.0; n * o * g.col_cols()];
        let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
        for i in 0..n {
            cols.iter_mut().for_each(|v| *v = 0.0);
            g.im2col(&xv.data()[i * g.image_len()..(i + 1) * g.image_len()], &mut cols);
            let dst = &mut out[i * o * g.col_cols()..(i + 1) * o * g.col_cols()];
            gemm(o, g.col_rows(), g.col_cols(), wv.data(), false, &cols, false, dst, false);
        }
        let t = Tensor::new([n, o, g.out_h, g.out_w], out);
        let rg = self.rg(x) || self.rg(w);
        self.push(t, Op::Conv2d { x, w, stride, pad }, rg)
    }

    /// Transposed 2D convolution, NCHW input `[n, ci, h, w]`, weights `[ci, co, k, k]`.
    /// Output spatial size is `(h - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (n, ci, h, wd) = dims4(xv);
        let (wci, co, k, _) = dims4(wv);
        assert_eq!(ci, wci, "conv_transpose2d channel mismatch");
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wd - 1) * stride + k - 2 * pad;
        let g = ConvGeom::new(co, oh, ow, k, stride, pad);
        assert_eq!((g.out_h, g.out_w), (h, wd), "conv_transpose2d geometry does not invert");
        let mut out = vec![0.0; n * g.image_len()];
        let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
        for i in 0..n {
            let xi = &xv.data()[i * ci * h * wd..(i + 1) * ci * h * wd];
            gemm(g.col_rows(), ci, g.col_cols(), wv.data(), true, xi, false, &mut cols, false);
            g.col2im(&cols, &mut out[i * g.image_len()..(i + 1) * g.image_len()]);
        }
        let t = Tensor::new([n, co, oh, ow], out);
        let rg = self.rg(x) || self.rg(w);
        self.push(t, Op::ConvTranspose2d { x, w, stride, pad }, rg)
    }

    /// Add a per-channel bias `[c]` to an NCHW tensor `[n, c, h, w]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[b.0].value;
        let (_, c, h, w) = dims4(xv);
        assert_eq!(bv.shape(), &[c], "channel bias shape mismatch");
        let hw = h * w;
        let data = xv.data().iter().enumerate().map(|(i, v)| v + bv.data()[(i / hw) % c]).collect();
        let t = Tensor::new(xv.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(b);
        self.push(t, Op::ChannelBias(x, b), rg)
    }

    /// Relative-position gather on `[.., t, t]` scores indexed by (query, distance):
    /// `out[.., i, j] = a[.., i, i - j]` for `j <= i`, zero above the diagonal.
    pub fn rel_gather(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let s = av.shape();
        let t = s[s.len() - 1];
        assert_eq!(s[s.len() - 2], t, "rel_gather needs square trailing dims");
        let mut out = vec![0.0; av.numel()];
        for (blk_in, blk_out) in av.data().chunks(t * t).zip(out.chunks_mut(t * t)) {
            for i in 0..t {
                for j in 0..=i {
                    blk_out[i * t + j] = blk_in[i * t + (i - j)];
                }
            }
        }
        let tv = Tensor::new(s.to_vec(), out);
        let rg = self.rg(a);
        self.push(tv, Op::RelGather(a), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let lv = &self.nodes[loss.0].value;
        assert_eq!(lv.numel(), 1, "backward needs a scalar loss, got {:?}", lv.shape());
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));
        let mut out = Grads::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |v: Var, t: Tensor| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(e) => e.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    match node.param {
                        Some(key) => {
                            out.params.insert(key, g);
                        }
                        None => {
                            out.leaves.insert(i, g);
                        }
                    }
                    continue;
                }
                Op::Add(a, b) => {
                    let gb = reduce_to(&g, self.shape(*b));
                    acc(*a, g);
                    acc(*b, gb);
                }
                Op::Sub(a, b) => {
                    let gb = reduce_to(&g, self.shape(*b)).map(|x| -x);
                    acc(*a, g);
                    acc(*b, gb);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let n = bv.numel().max(1);
                    if self.rg(*a) {
                        let ga = Tensor::new(
                            g.shape().to_vec(),
                            g.data().iter().enumerate().map(|(k, x)| x * bv.data()[k % n]).collect(),
                        );
                        acc(*a, ga);
                    }
                    if self.rg(*b) {
                        acc(*b, reduce_to(&g.zip_map(av, |x, y| x * y), bv.shape()));
                    }
                }
                Op::Div(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let n = bv.numel().max(1);
                    let bd = bv.data();
                    if self.rg(*a) {
                        let ga = Tensor::new(
                            g.shape().to_vec(),
                            g.data().iter().enumerate().map(|(k, x)| x / bd[k % n]).collect(),
                        );
                        acc(*a, ga);
                    }
                    if self.rg(*b) {
                        let gb = Tensor::new(
                            g.shape().to_vec(),
                            g.data()
                                .iter()
                                .zip(av.data())
                                .enumerate()
                                .map(|(k, (x, y))| -x * y / (bd[k % n] * bd[k % n]))
                                .collect(),
                        );
                        acc(*b, reduce_to(&gb, bv.shape()));
                    }
                }
                Op::MulConst(a, c) => {
                    let n = c.numel().max(1);
                    let ga = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().enumerate().map(|(k, x)| x * c.data()[k % n]).collect(),
                    );
                    acc(*a, ga);
                }
                Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
                Op::Shift(a) | Op::PassThrough(a) => acc(*a, g),
                Op::Unary(a, u) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let data: Vec<f64> = match u {
                        Unary::Relu => zip3(&g, x, y, |g, x, _| if x > 0.0 { g } else { 0.0 }),
                        Unary::Elu => zip3(&g, x, y, |g, x, y| if x > 0.0 { g } else { g * (y + 1.0) }),
                        Unary::Tanh => zip3(&g, x, y, |g, _, y| g * (1.0 - y * y)),
                        Unary::Sigmoid => zip3(&g, x, y, |g, _, y| g * y * (1.0 - y)),
                        Unary::Exp => zip3(&g, x, y, |g, _, y| g * y),
                        Unary::Ln => zip3(&g, x, y, |g, x, _| g / x),
                        Unary::Softplus => zip3(&g, x, y, |g, x, _| g * sigmoid(x)),
                        Unary::Square => zip3(&g, x, y, |g, x, _| 2.0 * g * x),
                        Unary::ClampMin(m) => {
                            let m = *m;
                            zip3(&g, x, y, move |g, x, _| if x > m { g } else { 0.0 })
                        }
                    };
                    acc(*a, Tensor::new(g.shape().to_vec(), data));
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if self.rg(*a) {
                        acc(*a, matmul_grad_a(&g, bv, av.shape()));
                    }
                    if self.rg(*b) {
                        acc(*b, matmul_grad_b(&g, av, bv.shape()));
                    }
                }
                Op::Transpose(a) => acc(*a, transpose_last(&g)),
                Op::Permute(a, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    acc(*a, permute_tensor(&g, &inv));
                }
                Op::Reshape(a) => {
                    let s = self.shape(*a).to_vec();
                    acc(*a, g.reshape(s));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let d = y.last_dim();
                    let mut out = g.data().to_vec();
                    for (gr, yr) in out.chunks_mut(d).zip(y.data().chunks(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    acc(*a, Tensor::new(g.shape().to_vec(), out));
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let d = y.last_dim();
                    let mut out = g.data().to_vec();
                    for (gr, yr) in out.chunks_mut(d).zip(y.data().chunks(d)) {
                        let s: f64 = gr.iter().sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv -= yv.exp() * s;
                        }
                    }
                    acc(*a, Tensor::new(g.shape().to_vec(), out));
                }
                Op::LayerNorm(a, inv) => {
                    let y = &node.value;
                    let d = y.last_dim();
                    let mut out = g.data().to_vec();
                    for ((gr, yr), is) in out.chunks_mut(d).zip(y.data().chunks(d)).zip(inv) {
                        let mg = gr.iter().sum::<f64>() / d as f64;
                        let mgy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / d as f64;
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = is * (*gv - mg - yv * mgy);
                        }
                    }
                    acc(*a, Tensor::new(g.shape().to_vec(), out));
                }
                Op::SumAll(a) => {
                    let s = self.shape(*a).to_vec();
                    acc(*a, Tensor::full(s, g.item()));
                }
                Op::MeanAll(a) => {
                    let s = self.shape(*a).to_vec();
                    let n: usize = s.iter().product();
                    acc(*a, Tensor::full(s, g.item() / n as f64));
                }
                Op::SumLast(a) => {
                    let s = self.shape(*a).to_vec();
                    let d = *s.last().unwrap_or(&1);
                    let data = g.data().iter().flat_map(|&x| std::iter::repeat_n(x, d)).collect();
                    acc(*a, Tensor::new(s, data));
                }
                Op::Concat(parts, axis) => {
                    let shape = node.value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let total = shape[*axis] * inner;
                    let mut offset = 0;
                    for p in parts {
                        let ps = self.shape(*p).to_vec();
                        let len = ps[*axis] * inner;
                        if self.rg(*p) {
                            let mut data = Vec::with_capacity(outer * len);
                            for o in 0..outer {
                                data.extend_from_slice(&g.data()[o * total + offset..o * total + offset + len]);
                            }
                            acc(*p, Tensor::new(ps, data));
                        }
                        offset += len;
                    }
                }
                Op::Narrow(a, axis, start) => {
                    let s = self.shape(*a).to_vec();
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[axis + 1..].iter().product();
                    let full = s[*axis] * inner;
                    let len = node.value.shape()[*axis] * inner;
                    let mut data = vec![0.0; outer * full];
                    for o in 0..outer {
                        data[o * full + start * inner..o * full + start * inner + len]
                            .copy_from_slice(&g.data()[o * len..(o + 1) * len]);
                    }
                    acc(*a, Tensor::new(s, data));
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, c, h, wd) = dims4(xv);
                    let (o, _, k, _) = dims4(wv);
                    let geo = ConvGeom::new(c, h, wd, k, *stride, *pad);
                    let mut gx = vec![0.0; xv.numel()];
                    let mut gw = vec![0.0; wv.numel()];
                    let mut cols = vec![0.0; geo.col_rows() * geo.col_cols()];
                    let gl = o * geo.col_cols();
                    for i in 0..n {
                        let gi = &g.data()[i * gl..(i + 1) * gl];
                        if self.rg(*w) {
                            cols.iter_mut().for_each(|v| *v = 0.0);
                            geo.im2col(&xv.data()[i * geo.image_len()..(i + 1) * geo.image_len()], &mut cols);
                            gemm(o, geo.col_cols(), geo.col_rows(), gi, false, &cols, true, &mut gw, true);
                        }
                        if self.rg(*x) {
                            gemm(geo.col_rows(), o, geo.col_cols(), wv.data(), true, gi, false, &mut cols, false);
                            geo.col2im(&cols, &mut gx[i * geo.image_len()..(i + 1) * geo.image_len()]);
                        }
                    }
                    acc(*x, Tensor::new(xv.shape().to_vec(), gx));
                    acc(*w, Tensor::new(wv.shape().to_vec(), gw));
                }
                Op::ConvTranspose2d { x, w, stride, pad } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, ci, h, wd) = dims4(xv);
                    let (_, co, k, _) = dims4(wv);
                    let ys = node.value.shape();
                    let geo = ConvGeom::new(co, ys[2], ys[3], k, *stride, *pad);
                    let mut gx = vec![0.0; xv.numel()];
                    let mut gw = vec![0.0; wv.numel()];
                    let mut cols = vec![0.0; geo.col_rows() * geo.col_cols()];
                    let xl = ci * h * wd;
                    for i in 0..n {
                        cols.iter_mut().for_each(|v| *v = 0.0);
                        geo.im2col(&g.data()[i * geo.image_len()..(i + 1) * geo.image_len()], &mut cols);
                        if self.rg(*x) {
                            gemm(
                                ci,
                                geo.col_rows(),
                                geo.col_cols(),
                                wv.data(),
                                false,
                                &cols,
                                false,
                                &mut gx[i * xl..(i + 1) * xl],
                                false,
                            );
                        }
                        if self.rg(*w) {
                            gemm(
                                ci,
                                geo.col_cols(),
                                geo.col_rows(),
                                &xv.data()[i * xl..(i + 1) * xl],
                                false,
                                &cols,
                                true,
                                &mut gw,
                                true,
                            );
                        }
                    }
                    acc(*x, Tensor::new(xv.shape().to_vec(), gx));
                    acc(*w, Tensor::new(wv.shape().to_vec(), gw));
                }
                Op::ChannelBias(x, b) => {
                    let (_, c, h, w) = dims4(&g);
                    let hw = h * w;
                    if self.rg(*b) {
                        let mut gb = vec![0.0; c];
                        for (i, v) in g.data().iter().enumerate() {
                            gb[(i / hw) % c] += v;
                        }
                        acc(*b, Tensor::new([c], gb));
                    }
                    acc(*x, g);
                }
                Op::RelGather(a) => {
                    let s = node.value.shape();
                    let t = s[s.len() - 1];
                    let mut out = vec![0.0; g.numel()];
                    for (gb, ob) in g.data().chunks(t * t).zip(out.chunks_mut(t * t)) {
                        for i in 0..t {
                            for j in 0..=i {
                                ob[i * t + (i - j)] += gb[i * t + j];
                            }
                        }
                    }
                    acc(*a, Tensor::new(s.to_vec(), out));
                }
            }
        }
        out
    }
}

fn zip3(g: &Tensor, x: &Tensor, y: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Vec<f64> {
    g.data().iter().zip(x.data()).zip(y.data()).map(|((&g, &x), &y)| f(g, x, y)).collect()
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected a rank-4 tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// Split `[.., n, k]` into (batch, n, k).
fn mat_dims(s: &[usize]) -> (usize, usize, usize) {
    assert!(s.len() >= 2, "matmul operand needs rank >= 2, got {s:?}");
    let n = s[s.len() - 2];
    let k = s[s.len() - 1];
    (s[..s.len() - 2].iter().product(), n, k)
}

fn matmul_fwd(a: &Tensor, b: &Tensor) -> Tensor {
    let (ba, n, k) = mat_dims(a.shape());
    let (bb, kb, m) = mat_dims(b.shape());
    assert_eq!(k, kb, "matmul inner dims differ: {:?} x {:?}", a.shape(), b.shape());
    let mut shape = a.shape()[..a.ndim() - 1].to_vec();
    shape.push(m);
    let mut out = vec![0.0; ba * n * m];
    if b.ndim() == 2 {
        gemm(ba * n, k, m, a.data(), false, b.data(), false, &mut out, false);
    } else {
        assert_eq!(a.shape()[..a.ndim() - 2], b.shape()[..b.ndim() - 2], "matmul batch dims differ");
        debug_assert_eq!(ba, bb);
        for i in 0..ba {
            gemm(
                n,
                k,
                m,
                &a.data()[i * n * k..(i + 1) * n * k],
                false,
                &b.data()[i * k * m..(i + 1) * k * m],
                false,
                &mut out[i * n * m..(i + 1) * n * m],
                false,
            );
        }
    }
    Tensor::new(shape, out)
}

fn matmul_grad_a(g: &Tensor, b: &Tensor, a_shape: &[usize]) -> Tensor {
    let (ba, n, k) = mat_dims(a_shape);
    let m = b.last_dim();
    let mut out = vec![0.0; ba * n * k];
    if b.ndim() == 2 {
        gemm(ba * n, m, k, g.data(), false, b.data(), true, &mut out, false);
    } else {
        for i in 0..ba {
            gemm(
                n,
                m,
                k,
                &g.data()[i * n * m..(i + 1) * n * m],
                false,
                &b.data()[i * k * m..(i + 1) * k * m],
                true,
                &mut out[i * n * k..(i + 1) * n * k],
                false,
            );
        }
    }
    Tensor::new(a_shape.to_vec(), out)
}

fn matmul_grad_b(g: &Tensor, a: &Tensor, b_shape: &[usize]) -> Tensor {
    let (ba, n, k) = mat_dims(a.shape());
    let m = *b_shape.last().unwrap();
    if b_shape.len() == 2 {
        let mut out = vec![0.0; k * m];
        gemm(k, ba * n, m, a.data(), true, g.data(), false, &mut out, false);
        Tensor::new(b_shape.to_vec(), out)
    } else {
        let mut out = vec![0.0; ba * k * m];
        for i in 0..ba {
            gemm(
                k,
                n,
                m,
                &a.data()[i * n * k..(i + 1) * n * k],
                true,
                &g.data()[i * n * m..(i + 1) * n * m],
                false,
                &mut out[i * k * m..(i + 1) * k * m],
                false,
            );
        }
        Tensor::new(b_shape.to_vec(), out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
        let mut out = Tensor::zeros(x.shape().to_vec());
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            out.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        out
    }

    fn probe(shape: &[usize], seed: f64) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |i| ((i as f64 + 1.0) * seed).sin())
    }

    /// Check d/dx sum(w ⊙ op(x)) for a fixed random weighting `w`.
    fn check_unary(build: impl Fn(&mut Graph, Var) -> Var, x: Tensor) {
        let eval = |xt: &Tensor| -> (f64, Option<Tensor>) {
            let mut g = Graph::new();
            let xv = g.input(xt.clone());
            let y = build(&mut g, xv);
            let w = probe(g.shape(y), 0.731);
            let yw = g.mul_const(y, w);
            let s = g.sum(yw);
            let gr = g.backward(s);
            (g.value(s).item(), gr.wrt(xv).cloned())
        };
        let (_, analytic) = eval(&x);
        let analytic = analytic.expect("no gradient reached the input");
        let numeric = numeric_grad(&|t| eval(t).0, &x, 1e-6);
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn elementwise_grads() {
        let x = probe(&[2, 3], 1.3);
        check_unary(|g, x| g.tanh(x), x.clone());
        check_unary(|g, x| g.sigmoid(x), x.clone());
        check_unary(|g, x| g.elu(x), x.clone());
        check_unary(|g, x| g.exp(x), x.clone());
        check_unary(|g, x| g.softplus(x), x.clone());
        check_unary(|g, x| g.square(x), x.clone());
        check_unary(
            |g, x| {
                let e = g.exp(x);
                g.ln(e)
            },
            x.clone(),
        );
        check_unary(|g, x| g.softmax(x), x.clone());
        check_unary(|g, x| g.log_softmax(x), x.clone());
        check_unary(|g, x| g.layer_norm(x, 1e-5), x.clone());
        check_unary(|g, x| g.sum_last(x), x.clone());
        check_unary(|g, x| g.transpose(x), x.clone());
        check_unary(|g, x| g.narrow(x, 1, 1, 2), x.clone());
        check_unary(
            |g, x| {
                let y = g.scale(x, 2.0);
                g.concat(&[x, y], 0)
            },
            x.clone(),
        );
        check_unary(
            |g, x| {
                let y = g.scale(x, 2.0);
                g.concat(&[x, y], 1)
            },
            x.clone(),
        );
        check_unary(
            |g, x| {
                let s = g.sum(x);
                g.mul(x, s)
            },
            x.clone(),
        );
        check_unary(
            |g, x| {
                let d = g.add_scalar(x, 3.0);
                g.div(x, d)
            },
            x.clone(),
        );
        check_unary(
            |g, x| {
                let r = g.narrow(x, 0, 0, 1);
                let r = g.reshape(r, &[3]);
                let e = g.exp(r);
                g.div(x, e)
            },
            x,
        );
    }

    #[test]
    fn permute_grad_and_value() {
        let x = probe(&[2, 3, 4], 0.9);
        check_unary(|g, x| g.permute(x, &[2, 0, 1]), x.clone());
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let p = g.permute(v, &[2, 0, 1]);
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // element [k, i, j] == x[i, j, k]
        assert_eq!(g.value(p).data()[(3 * 2 + 1) * 3 + 2], x.data()[(3 + 2) * 4 + 3]);
    }

    #[test]
    fn matmul_grads_batched_and_shared() {
        let b = probe(&[3, 2], 0.4);
        check_unary(
            move |g, x| {
                let w = g.input(b.clone());
                g.matmul(x, w)
            },
            probe(&[2, 2, 3], 0.7),
        );
        let a = probe(&[2, 2, 3], 0.2);
        check_unary(
            move |g, x| {
                let av = g.constant(a.clone());
                g.matmul(av, x)
            },
            probe(&[2, 3, 4], 0.5),
        );
        let a2 = probe(&[5, 3], 0.3);
        check_unary(
            move |g, x| {
                let av = g.constant(a2.clone());
                g.matmul(av, x)
            },
            probe(&[3, 2], 0.8),
        );
    }

    #[test]
    fn broadcast_bias_grads() {
        let x = probe(&[4, 3], 0.3);
        let check_b = |op: fn(&mut Graph, Var, Var) -> Var| {
            let xc = x.clone();
            check_unary(
                move |g, b| {
                    let xv = g.constant(xc.clone());
                    let b2 = g.add_scalar(b, 2.0);
                    op(g, xv, b2)
                },
                probe(&[3], 1.1),
            );
        };
        check_b(|g, a, b| g.add(a, b));
        check_b(|g, a, b| g.sub(a, b));
        check_b(|g, a, b| g.mul(a, b));
        check_b(|g, a, b| g.div(a, b));
    }

    #[test]
    fn conv_grads() {
        let w = probe(&[3, 2, 3, 3], 0.21);
        check_unary(
            move |g, x| {
                let wv = g.constant(w.clone());
                g.conv2d(x, wv, 2, 1)
            },
            probe(&[2, 2, 5, 5], 0.6),
        );
        let x = probe(&[2, 2, 4, 4], 0.6);
        check_unary(
            move |g, w| {
                let xv = g.constant(x.clone());
                g.conv2d(xv, w, 2, 1)
            },
            probe(&[3, 2, 4, 4], 0.33),
        );
        let wt = probe(&[2, 3, 4, 4], 0.17);
        check_unary(
            move |g, x| {
                let wv = g.constant(wt.clone());
                g.conv_transpose2d(x, wv, 2, 1)
            },
            probe(&[2, 2, 3, 3], 0.45),
        );
        let xt = probe(&[2, 2, 3, 3], 0.45);
        check_unary(
            move |g, w| {
                let xv = g.constant(xt.clone());
                g.conv_transpose2d(xv, w, 2, 1)
            },
            probe(&[2, 3, 4, 4], 0.17),
        );
    }

    #[test]
    fn channel_bias_grad() {
        let b = probe(&[3], 0.3);
        check_unary(
            move |g, x| {
                let bv = g.constant(b.clone());
                g.add_channel_bias(x, bv)
            },
            probe(&[2, 3, 2, 2], 0.8),
        );
        let x = probe(&[2, 3, 2, 2], 0.8);
        check_unary(
            move |g, b| {
                let xv = g.constant(x.clone());
                g.add_channel_bias(xv, b)
            },
            probe(&[3], 0.3),
        );
    }

    #[test]
    fn conv_transpose_doubles_resolution() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 4, 4, 4]));
        let w = g.constant(Tensor::zeros([4, 3, 4, 4]));
        let y = g.conv_transpose2d(x, w, 2, 1);
        assert_eq!(g.shape(y), &[1, 3, 8, 8]);
        let x2 = g.constant(Tensor::zeros([1, 3, 8, 8]));
        let w2 = g.constant(Tensor::zeros([5, 3, 4, 4]));
        let y2 = g.conv2d(x2, w2, 2, 1);
        assert_eq!(g.shape(y2), &[1, 5, 4, 4]);
    }

    #[test]
    fn rel_gather_layout_and_grad() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new([3, 3], (0..9).map(|i| i as f64).collect()));
        let r = g.rel_gather(a);
        // row i, col j <= i picks distance i - j
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 0.0, 4.0, 3.0, 0.0, 8.0, 7.0, 6.0]);
        check_unary(|g, x| g.rel_gather(x), probe(&[2, 3, 3], 0.5));
    }

    #[test]
    fn straight_through_routes_gradient_to_probs() {
        let mut g = Graph::new();
        let logits = g.input(Tensor::new([1, 3], vec![0.1, 0.5, -0.2]));
        let p = g.softmax(logits);
        let s = g.straight_through(p, Tensor::new([1, 3], vec![0.0, 1.0, 0.0]));
        assert_eq!(g.value(s).data(), &[0.0, 1.0, 0.0]);
        let w = g.constant(Tensor::new([3], vec![1.0, 2.0, 3.0]));
        let sw = g.mul(s, w);
        let loss = g.sum(sw);
        let grads = g.backward(loss);
        // same as gradient of sum(w ⊙ p)
        let mut g2 = Graph::new();
        let l2 = g2.input(Tensor::new([1, 3], vec![0.1, 0.5, -0.2]));
        let p2 = g2.softmax(l2);
        let w2 = g2.constant(Tensor::new([3], vec![1.0, 2.0, 3.0]));
        let pw = g2.mul(p2, w2);
        let loss2 = g2.sum(pw);
        let grads2 = g2.backward(loss2);
        assert_eq!(grads.wrt(logits).unwrap(), grads2.wrt(l2).unwrap());
    }

    #[test]
    fn frozen_params_get_no_grad() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::full([2], 1.5));
        ps.set_frozen(true);
        let mut g = Graph::new();
        let b = g.bind(&ps);
        let x = g.input(Tensor::full([2], 2.0));
        let y = g.mul(x, b.var(w));
        let s = g.sum(y);
        let grads = g.backward(s);
        assert!(grads.param(&ps, w).is_none());
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.5, 1.5]);
    }
}
