//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of a forward pass. Leaves are either
//! constants or trainable variables; only nodes downstream of a trainable leaf
//! take part in [`Tape::backward`]. Tape operations panic on shape misuse:
//! callers at the public API boundary validate shapes before recording.

use rayon::prelude::*;

use crate::tensor::{col2im, gemm, im2col, Tensor, Window};

const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x[b,c,..] * a[b,0,..]`
    MulBroadcast(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    LogClamped(Var, f64),
    Abs(Var),
    Square(Var),
    Sum(Var),
    SumPerItem(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv {
        x: Var,
        w: Var,
        b: Var,
        window: Window,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Var,
        window: Window,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        invstd: Vec<f64>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that needed one.
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

/// Splits a shape into (batch, channels, inner) around axis 1.
fn axis1(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "axis-1 op needs rank >= 2, got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

/// `max(v, eps)` that lets NaN through.
pub(crate) fn clamp_below(v: f64, eps: f64) -> f64 {
    if v < eps {
        eps
    } else {
        v
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let out = va.zip_map(vb, f);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, op, needs)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        let needs = self.needs(x);
        self.push(out, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiplies every channel of `x` by the single-channel map `a`.
    pub fn mul_broadcast(&mut self, x: Var, a: Var) -> Var {
        let (vx, va) = (self.value(x), self.value(a));
        let (b, c, inner) = axis1(vx.shape());
        let (ba, ca, inner_a) = axis1(va.shape());
        assert!(b == ba && ca == 1 && inner == inner_a, "broadcast shape mismatch");
        let mut out = vx.clone();
        for (bi, chunk) in out.data_mut().chunks_mut(c * inner).enumerate() {
            let amap = va.item(bi);
            for plane in chunk.chunks_mut(inner) {
                for (o, s) in plane.iter_mut().zip(amap) {
                    *o *= s;
                }
            }
        }
        let needs = self.needs(x) || self.needs(a);
        self.push(out, Op::MulBroadcast(x, a), needs)
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, eps: f64) -> Var {
        self.unary(x, |v| clamp_below(v, eps).ln(), Op::LogClamped(x, eps))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(out, Op::Sum(x), needs)
    }

    /// Sums everything but the leading axis: `[B, ...] -> [B]`.
    pub fn sum_per_item(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.item_len();
        let data = v.data().chunks(n.max(1)).map(|c| c.iter().sum()).collect();
        let out = Tensor::new(&[v.batch()], data).expect("batch sum shape");
        let needs = self.needs(x);
        self.push(out, Op::SumPerItem(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape element count");
        let needs = self.needs(x);
        self.push(out, Op::Reshape(x), needs)
    }

    /// `x[B,K] · wᵀ[K,N] + b[N]`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (batch, k) = (vx.shape()[0], vx.shape()[1]);
        let n = vw.shape()[0];
        assert_eq!(vx.shape().len(), 2);
        assert_eq!(vw.shape(), &[n, k], "linear weight shape");
        assert_eq!(vb.shape(), &[n], "linear bias shape");
        let mut out = vec![0.0; batch * n];
        for row in out.chunks_mut(n) {
            row.copy_from_slice(vb.data());
        }
        gemm(batch, k, n, vx.data(), false, vw.data(), true, 1.0, &mut out);
        let out = Tensor::new(&[batch, n], out).unwrap();
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::Linear { x, w, b }, needs)
    }

    /// 2-d convolution with weight `[Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (batch, cin, h, wd) = vx.dims4().expect("conv input rank");
        let (cout, wcin, k, k2) = vw.dims4().expect("conv weight rank");
        assert!(wcin == cin && k == k2, "conv weight {:?} vs input {:?}", vw.shape(), vx.shape());
        assert_eq!(vb.shape(), &[cout]);
        let window = Window {
            channels: cin,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (wd + 2 * pad - k) / stride + 1,
        };
        let out_hw = window.out_h * window.out_w;
        let mut out = vec![0.0; batch * cout * out_hw];
        out.par_chunks_mut(cout * out_hw)
            .zip(vx.data().par_chunks(cin * h * wd))
            .for_each(|(o, img)| {
                let mut cols = vec![0.0; window.cols_len()];
                im2col(img, &window, &mut cols);
                for (c, plane) in o.chunks_mut(out_hw).enumerate() {
                    plane.fill(vb.data()[c]);
                }
                gemm(cout, window.cols_rows(), out_hw, vw.data(), false, &cols, false, 1.0, o);
            });
        let out = Tensor::new(&[batch, cout, window.out_h, window.out_w], out).unwrap();
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::Conv { x, w, b, window }, needs)
    }

    /// Fractionally strided (transposed) convolution with weight `[Cin, Cout, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (batch, cin, h, wd) = vx.dims4().expect("conv-transpose input rank");
        let (wcin, cout, k, k2) = vw.dims4().expect("conv-transpose weight rank");
        assert!(wcin == cin && k == k2, "conv-transpose weight {:?} vs input {:?}", vw.shape(), vx.shape());
        assert_eq!(vb.shape(), &[cout]);
        let out_h = (h - 1) * stride + k - 2 * pad;
        let out_w = (wd - 1) * stride + k - 2 * pad;
        let window = Window {
            channels: cout,
            height: out_h,
            width: out_w,
            kernel: k,
            stride,
            pad,
            out_h: h,
            out_w: wd,
        };
        let in_hw = h * wd;
        let plane = out_h * out_w;
        let mut out = vec![0.0; batch * cout * plane];
        out.par_chunks_mut(cout * plane)
            .zip(vx.data().par_chunks(cin * in_hw))
            .for_each(|(o, img)| {
                let mut cols = vec![0.0; window.cols_len()];
                gemm(window.cols_rows(), cin, in_hw, vw.data(), true, img, false, 0.0, &mut cols);
                for (c, p) in o.chunks_mut(plane).enumerate() {
                    p.fill(vb.data()[c]);
                }
                col2im(&cols, &window, o);
            });
        let out = Tensor::new(&[batch, cout, out_h, out_w], out).unwrap();
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::ConvTranspose { x, w, b, window }, needs)
    }

    /// Batch normalization over every axis except 1, using the batch statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (batch, c, inner) = axis1(vx.shape());
        assert_eq!(vg.shape(), &[c]);
        assert_eq!(vb.shape(), &[c]);
        let count = (batch * inner) as f64;
        let mut xhat = vx.clone();
        let mut out = vx.clone();
        let mut invstd = vec![0.0; c];
        for (ch, slot) in invstd.iter_mut().enumerate() {
            let planes = (0..batch).map(|b| &vx.data()[(b * c + ch) * inner..][..inner]);
            let mean = planes.clone().flatten().sum::<f64>() / count;
            let var = planes.flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let is = 1.0 / (var + BN_EPS).sqrt();
            *slot = is;
            for b in 0..batch {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    let h = (vx.data()[i] - mean) * is;
                    xhat.data_mut()[i] = h;
                    out.data_mut()[i] = vg.data()[ch] * h + vb.data()[ch];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
            },
            needs,
        )
    }

    /// Channels `start..start+len` along axis 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let (batch, c, inner) = axis1(vx.shape());
        assert!(start + len <= c, "channel slice out of range");
        let mut data = Vec::with_capacity(batch * len * inner);
        for b in 0..batch {
            data.extend_from_slice(&vx.data()[(b * c + start) * inner..][..len * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[1] = len;
        let out = Tensor::new(&shape, data).unwrap();
        let needs = self.needs(x);
        self.push(out, Op::Slice { x, start }, needs)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]).shape().to_vec();
        let (batch, _, inner) = axis1(&first);
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut data = Vec::with_capacity(batch * total * inner);
        for b in 0..batch {
            for &p in parts {
                let v = self.value(p);
                let (pb, _, pinner) = axis1(v.shape());
                assert!(pb == batch && pinner == inner, "concat shape mismatch");
                data.extend_from_slice(v.item(b));
            }
        }
        let mut shape = first;
        shape[1] = total;
        let out = Tensor::new(&shape, data).unwrap();
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::Concat(parts.to_vec()), needs)
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::MulBroadcast(x, a) => {
                let (vx, va) = (self.value(*x), self.value(*a));
                let (_, c, inner) = axis1(vx.shape());
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for (bi, chunk) in dx.data_mut().chunks_mut(c * inner).enumerate() {
                        let amap = va.item(bi);
                        for plane in chunk.chunks_mut(inner) {
                            for (o, s) in plane.iter_mut().zip(amap) {
                                *o *= s;
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*a) {
                    let mut da = Tensor::zeros(va.shape());
                    for (bi, dmap) in da.data_mut().chunks_mut(inner).enumerate() {
                        for ch in 0..c {
                            let off = (bi * c + ch) * inner;
                            let gp = &g.data()[off..off + inner];
                            let xp = &vx.data()[off..off + inner];
                            for ((d, gv), xv) in dmap.iter_mut().zip(gp).zip(xp) {
                                *d += gv * xv;
                            }
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
            }
            Op::Affine(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::Relu(x) => {
                let d = g.zip_map(out, |gv, o| if o > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *x, d);
            }
            Op::LeakyRelu(x, slope) => {
                let d = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { gv * slope });
                self.accumulate(grads, *x, d);
            }
            Op::Tanh(x) => self.accumulate(grads, *x, g.zip_map(out, |gv, o| gv * (1.0 - o * o))),
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, g.zip_map(out, |gv, o| gv * o * (1.0 - o)))
            }
            Op::Exp(x) => self.accumulate(grads, *x, g.zip_map(out, |gv, o| gv * o)),
            Op::LogClamped(x, eps) => {
                let d = g.zip_map(self.value(*x), |gv, xv| if xv > *eps { gv / xv } else { 0.0 });
                self.accumulate(grads, *x, d);
            }
            Op::Abs(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| {
                    if xv > 0.0 {
                        gv
                    } else if xv < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::Square(x) => {
                self.accumulate(grads, *x, g.zip_map(self.value(*x), |gv, xv| 2.0 * gv * xv))
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::SumPerItem(x) => {
                let vx = self.value(*x);
                let n = vx.item_len();
                let d = Tensor::from_fn(vx.shape(), |i| g.data()[i / n.max(1)]);
                self.accumulate(grads, *x, d);
            }
            Op::Reshape(x) => {
                let d = g.clone().reshape(self.shape(*x)).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Linear { x, w, b } => self.backprop_linear(*x, *w, *b, g, grads),
            Op::Conv { x, w, b, window } => self.backprop_conv(*x, *w, *b, window, g, grads),
            Op::ConvTranspose { x, w, b, window } => {
                self.backprop_conv_transpose(*x, *w, *b, window, g, grads)
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
            } => self.backprop_batch_norm(*x, *gamma, *beta, xhat, invstd, g, grads),
            Op::Slice { x, start } => {
                let vx = self.value(*x);
                let (batch, c, inner) = axis1(vx.shape());
                let len = g.shape()[1];
                let mut d = Tensor::zeros(vx.shape());
                for b in 0..batch {
                    d.data_mut()[(b * c + start) * inner..][..len * inner]
                        .copy_from_slice(&g.data()[b * len * inner..][..len * inner]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::Concat(parts) => {
                let (batch, total, inner) = axis1(g.shape());
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.needs(p) {
                        let mut d = Tensor::zeros(self.shape(p));
                        for b in 0..batch {
                            d.data_mut()[b * pc * inner..][..pc * inner]
                                .copy_from_slice(&g.data()[(b * total + offset) * inner..][..pc * inner]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    offset += pc;
                }
            }
        }
    }

    fn backprop_linear(&self, x: Var, w: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (vx, vw) = (self.value(x), self.value(w));
        let (batch, k) = (vx.shape()[0], vx.shape()[1]);
        let n = vw.shape()[0];
        if self.needs(x) {
            let mut dx = vec![0.0; batch * k];
            gemm(batch, n, k, g.data(), false, vw.data(), false, 0.0, &mut dx);
            self.accumulate(grads, x, Tensor::new(&[batch, k], dx).unwrap());
        }
        if self.needs(w) {
            let mut dw = vec![0.0; n * k];
            gemm(n, batch, k, g.data(), true, vx.data(), false, 0.0, &mut dw);
            self.accumulate(grads, w, Tensor::new(&[n, k], dw).unwrap());
        }
        if self.needs(b) {
            let mut db = vec![0.0; n];
            for row in g.data().chunks(n) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            self.accumulate(grads, b, Tensor::new(&[n], db).unwrap());
        }
    }

    fn backprop_conv(
        &self,
        x: Var,
        w: Var,
        b: Var,
        window: &Window,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (vx, vw) = (self.value(x), self.value(w));
        let (batch, cout, _, _) = g.dims4().unwrap();
        let out_hw = window.out_h * window.out_w;
        let in_len = window.channels * window.height * window.width;
        let rows = window.cols_rows();
        let (need_x, need_w) = (self.needs(x), self.needs(w));

        let per_item: Vec<(Vec<f64>, Vec<f64>)> = (0..batch)
            .into_par_iter()
            .map(|bi| {
                let gi = &g.data()[bi * cout * out_hw..][..cout * out_hw];
                let mut dx = Vec::new();
                let mut dw = Vec::new();
                if need_w {
                    let mut cols = vec![0.0; window.cols_len()];
                    im2col(&vx.data()[bi * in_len..][..in_len], window, &mut cols);
                    dw = vec![0.0; cout * rows];
                    gemm(cout, out_hw, rows, gi, false, &cols, true, 0.0, &mut dw);
                }
                if need_x {
                    let mut dcols = vec![0.0; window.cols_len()];
                    gemm(rows, cout, out_hw, vw.data(), true, gi, false, 0.0, &mut dcols);
                    dx = vec![0.0; in_len];
                    col2im(&dcols, window, &mut dx);
                }
                (dx, dw)
            })
            .collect();

        if need_x {
            let mut dx = Vec::with_capacity(batch * in_len);
            for (d, _) in &per_item {
                dx.extend_from_slice(d);
            }
            self.accumulate(grads, x, Tensor::new(vx.shape(), dx).unwrap());
        }
        if need_w {
            let mut dw = Tensor::zeros(vw.shape());
            for (_, d) in &per_item {
                for (acc, v) in dw.data_mut().iter_mut().zip(d) {
                    *acc += v;
                }
            }
            self.accumulate(grads, w, dw);
        }
        if self.needs(b) {
            self.accumulate(grads, b, channel_sums(g));
        }
    }

    fn backprop_conv_transpose(
        &self,
        x: Var,
        w: Var,
        b: Var,
        window: &Window,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (vx, vw) = (self.value(x), self.value(w));
        let (batch, cin, h, wd) = vx.dims4().unwrap();
        let in_hw = h * wd;
        let plane = window.channels * window.height * window.width;
        let rows = window.cols_rows();
        let (need_x, need_w) = (self.needs(x), self.needs(w));

        let per_item: Vec<(Vec<f64>, Vec<f64>)> = (0..batch)
            .into_par_iter()
            .map(|bi| {
                let mut dcols = vec![0.0; window.cols_len()];
                im2col(&g.data()[bi * plane..][..plane], window, &mut dcols);
                let mut dx = Vec::new();
                let mut dw = Vec::new();
                if need_x {
                    dx = vec![0.0; cin * in_hw];
                    gemm(cin, rows, in_hw, vw.data(), false, &dcols, false, 0.0, &mut dx);
                }
                if need_w {
                    dw = vec![0.0; cin * rows];
                    let xi = &vx.data()[bi * cin * in_hw..][..cin * in_hw];
                    gemm(cin, in_hw, rows, xi, false, &dcols, true, 0.0, &mut dw);
                }
                (dx, dw)
            })
            .collect();

        if need_x {
            let mut dx = Vec::with_capacity(batch * cin * in_hw);
            for (d, _) in &per_item {
                dx.extend_from_slice(d);
            }
            self.accumulate(grads, x, Tensor::new(vx.shape(), dx).unwrap());
        }
        if need_w {
            let mut dw = Tensor::zeros(vw.shape());
            for (_, d) in &per_item {
                for (acc, v) in dw.data_mut().iter_mut().zip(d) {
                    *acc += v;
                }
            }
            self.accumulate(grads, w, dw);
        }
        if self.needs(b) {
            self.accumulate(grads, b, channel_sums(g));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &Tensor,
        invstd: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (batch, c, inner) = axis1(g.shape());
        let count = (batch * inner) as f64;
        let vg = self.value(gamma);
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ch in 0..c {
            for b in 0..batch {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    dgamma[ch] += g.data()[i] * xhat.data()[i];
                    dbeta[ch] += g.data()[i];
                }
            }
        }
        if self.needs(x) {
            let mut dx = Tensor::zeros(g.shape());
            for ch in 0..c {
                let scale = vg.data()[ch] * invstd[ch] / count;
                for b in 0..batch {
                    let off = (b * c + ch) * inner;
                    for i in off..off + inner {
                        dx.data_mut()[i] = scale
                            * (count * g.data()[i] - dbeta[ch] - xhat.data()[i] * dgamma[ch]);
                    }
                }
            }
            self.accumulate(grads, x, dx);
        }
        if self.needs(gamma) {
            self.accumulate(grads, gamma, Tensor::new(&[c], dgamma).unwrap());
        }
        if self.needs(beta) {
            self.accumulate(grads, beta, Tensor::new(&[c], dbeta).unwrap());
        }
    }
}

fn channel_sums(g: &Tensor) -> Tensor {
    let (batch, c, inner) = axis1(g.shape());
    let mut s = vec![0.0; c];
    for b in 0..batch {
        for (ch, acc) in s.iter_mut().enumerate() {
            *acc += g.data()[(b * c + ch) * inner..][..inner].iter().sum::<f64>();
        }
    }
    Tensor::new(&[c], s).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, relative_error};

    fn seeded(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    /// Runs `build` on fresh tapes and compares analytic and numeric gradients of every input.
    fn assert_grads(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
            let eval = |t: &Tensor| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, orig)| tape.constant(if j == k { t.clone() } else { orig.clone() }))
                    .collect();
                let l = build(&mut tape, &vars);
                tape.value(l).data()[0]
            };
            let report = check_gradient(eval, input, &analytic, 1e-5, usize::MAX, 0);
            assert!(
                report.max_rel_error < 1e-5,
                "input {k}: max relative error {} at {}",
                report.max_rel_error,
                report.worst_index
            );
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let a = seeded(&[2, 3, 2], 1);
        let b = seeded(&[2, 3, 2], 2).map(|v| v.abs() + 0.1);
        assert_grads(vec![a, b], |t, v| {
            let s = t.sigmoid(v[0]);
            let th = t.tanh(v[1]);
            let m = t.mul(s, th);
            let e = t.exp(m);
            let l = t.log_clamped(v[1], 1e-7);
            let d = t.sub(e, l);
            let q = t.square(d);
            let r = t.leaky_relu(v[0], 0.2);
            let ab = t.abs(r);
            let sum = t.add(q, ab);
            let aff = t.affine(sum, 0.7, 0.3);
            t.sum(aff)
        });
    }

    #[test]
    fn broadcast_slice_concat_match_finite_differences() {
        let x = seeded(&[2, 3, 2, 2], 3);
        let a = seeded(&[2, 1, 2, 2], 4);
        assert_grads(vec![x, a], |t, v| {
            let m = t.mul_broadcast(v[0], v[1]);
            let s = t.slice_channels(m, 1, 2);
            let c = t.concat_channels(&[s, v[1], m]);
            let sq = t.square(c);
            let per = t.sum_per_item(sq);
            let w = t.sigmoid(per);
            t.sum(w)
        });
    }

    #[test]
    fn linear_and_batch_norm_match_finite_differences() {
        let x = seeded(&[4, 3], 5);
        let w = seeded(&[5, 3], 6);
        let b = seeded(&[5], 7);
        let gamma = seeded(&[5], 8).map(|v| v + 1.5);
        let beta = seeded(&[5], 9);
        let probe = seeded(&[4, 5], 10);
        assert_grads(vec![x, w, b, gamma, beta], move |t, v| {
            let y = t.linear(v[0], v[1], v[2]);
            let p = t.constant(probe.clone());
            let m = t.mul(y, p);
            let n = t.batch_norm(m, v[3], v[4]);
            let s = t.tanh(n);
            let s = t.mul(s, p);
            t.sum(s)
        });
    }

    #[test]
    fn convolutions_match_finite_differences() {
        let x = seeded(&[2, 2, 4, 4], 11);
        let w = seeded(&[3, 2, 4, 4], 12).map(|v| v * 0.5);
        let b = seeded(&[3], 13);
        let wt = seeded(&[3, 2, 4, 4], 14).map(|v| v * 0.5);
        let bt = seeded(&[2], 15);
        let gamma = seeded(&[3], 16).map(|v| v + 1.5);
        let beta = seeded(&[3], 17);
        assert_grads(vec![x, w, b, wt, bt, gamma, beta], |t, v| {
            let c = t.conv2d(v[0], v[1], v[2], 2, 1);
            let n = t.batch_norm(c, v[5], v[6]);
            let u = t.conv_transpose2d(n, v[3], v[4], 2, 1);
            let s = t.sigmoid(u);
            let sq = t.square(s);
            t.sum(sq)
        });
    }

    #[test]
    fn conv_shapes_follow_stride_two_recipe() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 3, 32, 32]));
        let w = t.constant(Tensor::zeros(&[8, 3, 4, 4]));
        let b = t.constant(Tensor::zeros(&[8]));
        let y = t.conv2d(x, w, b, 2, 1);
        assert_eq!(t.shape(y), &[1, 8, 16, 16]);
        let wt = t.constant(Tensor::zeros(&[8, 4, 4, 4]));
        let bt = t.constant(Tensor::zeros(&[4]));
        let z = t.conv_transpose2d(y, wt, bt, 2, 1);
        assert_eq!(t.shape(z), &[1, 4, 32, 32]);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = seeded(&[1, 2, 5, 5], 20);
        let w = seeded(&[3, 2, 3, 3], 21);
        let b = seeded(&[3], 22);
        let mut t = Tape::new();
        let (vx, vw, vb) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv2d(vx, vw, vb, 2, 1);
        let out = t.value(y);
        assert_eq!(out.shape(), &[1, 3, 3, 3]);
        for co in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = b.data()[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    acc += w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                        * x.data()[(ci * 5 + iy as usize) * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = out.data()[(co * 3 + oy) * 3 + ox];
                    assert!(relative_error(got, acc) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::full(&[2], 3.0));
        let v = t.variable(Tensor::full(&[2], 2.0));
        let m = t.mul(c, v);
        let s = t.sum(m);
        let g = t.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(v).unwrap().data(), &[3.0, 3.0]);
    }
}
