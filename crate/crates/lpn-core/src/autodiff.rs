//! Minimal reverse-mode differentiation over the kernel set.
//!
//! A [`Tape`] records every operation as it runs. Node indices only ever
//! reference earlier nodes, so walking the node list backwards is a reverse
//! topological order and each node is visited exactly once. Gradients are
//! checked against central finite differences by [`grad_check`]; checks run
//! in f64 while training runs in f32.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvParams};
use crate::tensor::{lit, Scalar, Shape, Tensor};

/// Handle to a node on a tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Value(usize);

#[derive(Clone, Debug)]
struct ConvCfg {
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
}

enum Op<T> {
    Leaf {
        tracked: bool,
    },
    Relu {
        x: Value,
    },
    Add {
        a: Value,
        b: Value,
    },
    Sub {
        a: Value,
        b: Value,
    },
    Mul {
        a: Value,
        b: Value,
    },
    Scale {
        x: Value,
        factor: f64,
    },
    Conv2d {
        x: Value,
        w: Value,
        bias: Option<Value>,
        cfg: ConvCfg,
    },
    ConvTranspose2d {
        x: Value,
        w: Value,
        bias: Option<Value>,
        cfg: ConvCfg,
    },
    /// Training-mode batch norm; saves the batch statistics for backward.
    BatchNorm {
        x: Value,
        gamma: Value,
        beta: Value,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    LayerNorm {
        x: Value,
        gamma: Value,
        beta: Value,
        epsilon: f64,
    },
    SpatialSoftmax {
        x: Value,
        scale: f64,
    },
    MaxPool {
        x: Value,
        argmax: Vec<usize>,
    },
    GlobalSumPool {
        x: Value,
    },
    BroadcastAddVec {
        x: Value,
        v: Value,
    },
    BroadcastMulMap {
        x: Value,
        m: Value,
    },
    Sum {
        x: Value,
    },
    MseLoss {
        pred: Value,
        target: Value,
    },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Single-threaded by design; run independent tapes for
/// concurrency.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Value {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Value(self.nodes.len() - 1)
    }

    fn needs(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Register a tensor whose gradient will be produced by `backward`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Value {
        self.push(Op::Leaf { tracked: true }, t, true)
    }

    /// Register a tensor treated as a constant (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Value {
        self.push(Op::Leaf { tracked: false }, t, false)
    }

    pub fn tensor(&self, v: Value) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn relu(&mut self, x: Value) -> Value {
        let y = kernels::relu(self.tensor(x));
        let rg = self.needs(x);
        self.push(Op::Relu { x }, y, rg)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let y = kernels::add(self.tensor(a), self.tensor(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, y, rg))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        let y = kernels::sub(self.tensor(a), self.tensor(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub { a, b }, y, rg))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let y = kernels::mul(self.tensor(a), self.tensor(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, y, rg))
    }

    pub fn scale(&mut self, x: Value, factor: f64) -> Value {
        let y = kernels::scale(self.tensor(x), factor);
        let rg = self.needs(x);
        self.push(Op::Scale { x, factor }, y, rg)
    }

    pub fn conv2d(
        &mut self,
        x: Value,
        w: Value,
        bias: Option<Value>,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Value> {
        let params = ConvParams::new(
            self.tensor(w).clone(),
            bias.map(|b| self.tensor(b).data().to_vec()),
            stride,
            padding,
            groups,
        );
        let y = kernels::conv2d(self.tensor(x), &params)?;
        let rg = self.needs(x) || self.needs(w) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                bias,
                cfg: ConvCfg {
                    stride,
                    padding,
                    groups,
                },
            },
            y,
            rg,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose2d(
        &mut self,
        x: Value,
        w: Value,
        bias: Option<Value>,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
        output_padding: (usize, usize),
    ) -> Result<Value> {
        let params = ConvParams::new(
            self.tensor(w).clone(),
            bias.map(|b| self.tensor(b).data().to_vec()),
            stride,
            padding,
            groups,
        );
        let y = kernels::conv_transpose2d(self.tensor(x), &params, output_padding)?;
        let rg = self.needs(x) || self.needs(w) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Op::ConvTranspose2d {
                x,
                w,
                bias,
                cfg: ConvCfg {
                    stride,
                    padding,
                    groups,
                },
            },
            y,
            rg,
        ))
    }

    /// Training-mode batch norm. `gamma`/`beta` are `(1, c, 1, 1)` tensors on
    /// the tape. Returns the output node plus the batch mean and biased
    /// variance so the caller can update its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Value,
        gamma: Value,
        beta: Value,
        epsilon: f64,
    ) -> Result<(Value, Vec<T>, Vec<T>)> {
        let xs = self.tensor(x).shape();
        let c = xs.c;
        let gs = self.tensor(gamma).shape();
        let bs = self.tensor(beta).shape();
        if gs != Shape::new(1, c, 1, 1) || bs != Shape::new(1, c, 1, 1) {
            return Err(Error::shape(format!(
                "batch_norm: affine shapes {gs}/{bs} do not match input channels {c}"
            )));
        }
        let count = xs.n * xs.h * xs.w;
        if count == 0 {
            return Err(Error::invalid("batch_norm: empty input"));
        }
        let inv_count = T::one() / lit::<T>(count as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        {
            let xt = self.tensor(x);
            for ch in 0..c {
                let mut sum = T::zero();
                for n in 0..xs.n {
                    for &v in xt.plane(n, ch) {
                        sum += v;
                    }
                }
                mean[ch] = sum * inv_count;
                let mut sq = T::zero();
                for n in 0..xs.n {
                    for &v in xt.plane(n, ch) {
                        let d = v - mean[ch];
                        sq += d * d;
                    }
                }
                var[ch] = sq * inv_count;
            }
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + lit::<T>(epsilon)).sqrt())
            .collect();
        let mut y = Tensor::zeros(xs);
        {
            let g = self.tensor(gamma);
            let b = self.tensor(beta);
            let xt = self.tensor(x);
            for ch in 0..c {
                let scale = g.at(0, ch, 0, 0) * inv_std[ch];
                let shift = b.at(0, ch, 0, 0) - mean[ch] * scale;
                for n in 0..xs.n {
                    let src = xt.plane(n, ch);
                    let dst = y.plane_mut(n, ch);
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = v * scale + shift;
                    }
                }
            }
        }
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let node = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std,
            },
            y,
            rg,
        );
        Ok((node, mean, var))
    }

    /// Layer norm over the per-sample channel vector `(n, c, 1, 1)`.
    pub fn layer_norm(
        &mut self,
        x: Value,
        gamma: Value,
        beta: Value,
        epsilon: f64,
    ) -> Result<Value> {
        let params = kernels::LayerNormParams {
            gamma: self.tensor(gamma).data().to_vec(),
            beta: self.tensor(beta).data().to_vec(),
            epsilon,
        };
        let y = kernels::layer_norm_vec(self.tensor(x), &params)?;
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                epsilon,
            },
            y,
            rg,
        ))
    }

    pub fn spatial_softmax(&mut self, x: Value, scale: f64) -> Result<Value> {
        let y = kernels::spatial_softmax(self.tensor(x), scale)?;
        let rg = self.needs(x);
        Ok(self.push(Op::SpatialSoftmax { x, scale }, y, rg))
    }

    pub fn max_pool2d(
        &mut self,
        x: Value,
        k: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Value> {
        let (y, argmax) = kernels::max_pool2d_with_argmax(self.tensor(x), k, stride, pad)?;
        let rg = self.needs(x);
        Ok(self.push(Op::MaxPool { x, argmax }, y, rg))
    }

    pub fn global_sum_pool(&mut self, x: Value) -> Value {
        let y = kernels::global_sum_pool(self.tensor(x));
        let rg = self.needs(x);
        self.push(Op::GlobalSumPool { x }, y, rg)
    }

    pub fn broadcast_add_vec(&mut self, x: Value, v: Value) -> Result<Value> {
        let y = kernels::broadcast_add_vec(self.tensor(x), self.tensor(v))?;
        let rg = self.needs(x) || self.needs(v);
        Ok(self.push(Op::BroadcastAddVec { x, v }, y, rg))
    }

    pub fn broadcast_mul_map(&mut self, x: Value, m: Value) -> Result<Value> {
        let y = kernels::broadcast_mul_map(self.tensor(x), self.tensor(m))?;
        let rg = self.needs(x) || self.needs(m);
        Ok(self.push(Op::BroadcastMulMap { x, m }, y, rg))
    }

    /// Sum of all elements, producing a `(1,1,1,1)` scalar.
    pub fn sum(&mut self, x: Value) -> Value {
        let total: T = self.tensor(x).data().iter().copied().sum();
        let y = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![total]).unwrap();
        let rg = self.needs(x);
        self.push(Op::Sum { x }, y, rg)
    }

    /// Mean squared error producing a `(1,1,1,1)` scalar.
    pub fn mse_loss(&mut self, pred: Value, target: Value) -> Result<Value> {
        let p = self.tensor(pred);
        let t = self.tensor(target);
        if p.shape() != t.shape() {
            return Err(Error::shape(format!(
                "mse_loss: shapes {} and {} differ",
                p.shape(),
                t.shape()
            )));
        }
        let inv_n = T::one() / lit::<T>(p.numel() as f64);
        let mut acc = T::zero();
        for (&a, &b) in p.data().iter().zip(t.data()) {
            let d = a - b;
            acc += d * d;
        }
        let y = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![acc * inv_n]).unwrap();
        let rg = self.needs(pred) || self.needs(target);
        Ok(self.push(Op::MseLoss { pred, target }, y, rg))
    }

    /// Reverse pass from a scalar root. Tracked leaves the root does not
    /// reach get zero gradients.
    pub fn backward(&mut self, root: Value) -> Result<Gradients<T>> {
        if self.tensor(root).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward: root must be scalar, got shape {}",
                self.tensor(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(Shape::new(1, 1, 1, 1), T::one()));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let gy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { tracked: true } = node.op {
                if grads[i].is_none() {
                    grads[i] = Some(Tensor::zeros(node.value.shape()));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], v: Value, delta: Tensor<T>) -> Result<()> {
        match &mut grads[v.0] {
            Some(g) => {
                let sum = kernels::add(g, &delta)?;
                *g = sum;
            }
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn propagate(
        &self,
        idx: usize,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::Relu { x } => {
                if self.needs(*x) {
                    let xt = self.tensor(*x);
                    let mut gx = gy.clone();
                    for (g, &v) in gx.data_mut().iter_mut().zip(xt.data()) {
                        // subgradient at exactly 0 is defined as 0
                        if v <= T::zero() {
                            *g = T::zero();
                        }
                    }
                    Self::accumulate(grads, *x, gx)?;
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, gy.clone())?;
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, gy.clone())?;
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, gy.clone())?;
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, kernels::scale(gy, -1.0))?;
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, kernels::mul(gy, self.tensor(*b))?)?;
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, kernels::mul(gy, self.tensor(*a))?)?;
                }
            }
            Op::Scale { x, factor } => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, kernels::scale(gy, *factor))?;
                }
            }
            Op::Conv2d { x, w, bias, cfg } => {
                self.conv2d_backward(*x, *w, *bias, cfg, gy, grads)?;
            }
            Op::ConvTranspose2d { x, w, bias, cfg } => {
                self.conv_transpose2d_backward(*x, *w, *bias, cfg, gy, grads)?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                self.batch_norm_backward(*x, *gamma, *beta, mean, inv_std, gy, grads)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                epsilon,
            } => {
                self.layer_norm_backward(*x, *gamma, *beta, *epsilon, gy, grads)?;
            }
            Op::SpatialSoftmax { x, scale } => {
                if self.needs(*x) {
                    // s = softmax(scale * x): dx = scale * s * (gy - sum(gy * s))
                    let s = &self.nodes[idx].value;
                    let shape = s.shape();
                    let mut gx = Tensor::zeros(shape);
                    let sc = lit::<T>(*scale);
                    for n in 0..shape.n {
                        for c in 0..shape.c {
                            let sp = s.plane(n, c);
                            let gp = gy.plane(n, c);
                            let mut dot = T::zero();
                            for (&sv, &gv) in sp.iter().zip(gp) {
                                dot += sv * gv;
                            }
                            let dst = gx.plane_mut(n, c);
                            for ((d, &sv), &gv) in dst.iter_mut().zip(sp).zip(gp) {
                                *d = sc * sv * (gv - dot);
                            }
                        }
                    }
                    Self::accumulate(grads, *x, gx)?;
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.needs(*x) {
                    let mut gx = Tensor::zeros(self.tensor(*x).shape());
                    for (out_i, &src_i) in argmax.iter().enumerate() {
                        gx.data_mut()[src_i] += gy.data()[out_i];
                    }
                    Self::accumulate(grads, *x, gx)?;
                }
            }
            Op::GlobalSumPool { x } => {
                if self.needs(*x) {
                    let xs = self.tensor(*x).shape();
                    let mut gx = Tensor::zeros(xs);
                    for n in 0..xs.n {
                        for c in 0..xs.c {
                            let g = gy.at(n, c, 0, 0);
                            for d in gx.plane_mut(n, c) {
                                *d = g;
                            }
                        }
                    }
                    Self::accumulate(grads, *x, gx)?;
                }
            }
            Op::BroadcastAddVec { x, v } => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, gy.clone())?;
                }
                if self.needs(*v) {
                    let vs = self.tensor(*v).shape();
                    let gys = gy.shape();
                    let mut gv = Tensor::zeros(vs);
                    for n in 0..gys.n {
                        let vn = if vs.n == 1 { 0 } else { n };
                        for c in 0..gys.c {
                            let mut acc = T::zero();
                            for &g in gy.plane(n, c) {
                                acc += g;
                            }
                            *gv.at_mut(vn, c, 0, 0) += acc;
                        }
                    }
                    Self::accumulate(grads, *v, gv)?;
                }
            }
            Op::BroadcastMulMap { x, m } => {
                let xs = self.tensor(*x).shape();
                if self.needs(*x) {
                    let mt = self.tensor(*m);
                    let mut gx = Tensor::zeros(xs);
                    for n in 0..xs.n {
                        let map = mt.plane(n, 0);
                        for c in 0..xs.c {
                            let gp = gy.plane(n, c);
                            let dst = gx.plane_mut(n, c);
                            for ((d, &g), &w) in dst.iter_mut().zip(gp).zip(map) {
                                *d = g * w;
                            }
                        }
                    }
                    Self::accumulate(grads, *x, gx)?;
                }
                if self.needs(*m) {
                    let xt = self.tensor(*x);
                    let mut gm = Tensor::zeros(self.tensor(*m).shape());
                    for n in 0..xs.n {
                        let dst = gm.plane_mut(n, 0);
                        for c in 0..xs.c {
                            let gp = gy.plane(n, c);
                            let xp = xt.plane(n, c);
                            for ((d, &g), &xv) in dst.iter_mut().zip(gp).zip(xp) {
                                *d += g * xv;
                            }
                        }
                    }
                    Self::accumulate(grads, *m, gm)?;
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let g = gy.data()[0];
                    Self::accumulate(grads, *x, Tensor::full(self.tensor(*x).shape(), g))?;
                }
            }
            Op::MseLoss { pred, target } => {
                // d/dp mean((p-t)^2) = 2 (p - t) / N
                let p = self.tensor(*pred);
                let t = self.tensor(*target);
                let coeff = gy.data()[0] * lit::<T>(2.0 / p.numel() as f64);
                if self.needs(*pred) {
                    let mut gp = Tensor::zeros(p.shape());
                    for ((d, &a), &b) in gp.data_mut().iter_mut().zip(p.data()).zip(t.data()) {
                        *d = coeff * (a - b);
                    }
                    Self::accumulate(grads, *pred, gp)?;
                }
                if self.needs(*target) {
                    let mut gt = Tensor::zeros(t.shape());
                    for ((d, &a), &b) in gt.data_mut().iter_mut().zip(p.data()).zip(t.data()) {
                        *d = -(coeff * (a - b));
                    }
                    Self::accumulate(grads, *target, gt)?;
                }
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        x: Value,
        w: Value,
        bias: Option<Value>,
        cfg: &ConvCfg,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let xt = self.tensor(x);
        let wt = self.tensor(w);
        let xs = xt.shape();
        let ws = wt.shape();
        let (kh, kw) = (ws.h, ws.w);

        if self.needs(x) {
            // dX = conv_transpose2d(dY, W); output_padding recovers the exact
            // input size when the stride skipped trailing rows/columns.
            let oph = xs.h + 2 * cfg.padding.0 - ((gy.shape().h - 1) * cfg.stride.0 + kh);
            let opw = xs.w + 2 * cfg.padding.1 - ((gy.shape().w - 1) * cfg.stride.1 + kw);
            let params = ConvParams::new(wt.clone(), None, cfg.stride, cfg.padding, cfg.groups);
            let gx = kernels::conv_transpose2d(gy, &params, (oph, opw))?;
            Self::accumulate(grads, x, gx)?;
        }
        if self.needs(w) {
            let cg = ws.c;
            let ocg = ws.n / cfg.groups;
            let gys = gy.shape();
            let mut gw = Tensor::zeros(ws);
            for o in 0..ws.n {
                let g = o / ocg;
                for ci in 0..cg {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut acc = T::zero();
                            for n in 0..xs.n {
                                let xp = xt.plane(n, g * cg + ci);
                                let gp = gy.plane(n, o);
                                for oy in 0..gys.h {
                                    let iy = (oy * cfg.stride.0 + ky) as isize
                                        - cfg.padding.0 as isize;
                                    if iy < 0 || iy >= xs.h as isize {
                                        continue;
                                    }
                                    for ox in 0..gys.w {
                                        let ix = (ox * cfg.stride.1 + kx) as isize
                                            - cfg.padding.1 as isize;
                                        if ix < 0 || ix >= xs.w as isize {
                                            continue;
                                        }
                                        acc += xp[iy as usize * xs.w + ix as usize]
                                            * gp[oy * gys.w + ox];
                                    }
                                }
                            }
                            *gw.at_mut(o, ci, ky, kx) = acc;
                        }
                    }
                }
            }
            Self::accumulate(grads, w, gw)?;
        }
        if let Some(bv) = bias {
            if self.needs(bv) {
                Self::accumulate(grads, bv, channel_sums(gy, self.tensor(bv).shape())?)?;
            }
        }
        Ok(())
    }

    fn conv_transpose2d_backward(
        &self,
        x: Value,
        w: Value,
        bias: Option<Value>,
        cfg: &ConvCfg,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let xt = self.tensor(x);
        let wt = self.tensor(w);
        let xs = xt.shape();
        let ws = wt.shape(); // (in_c, out_c/groups, kh, kw)
        let (ocg, kh, kw) = (ws.c, ws.h, ws.w);
        let icg = xs.c / cfg.groups;
        let gys = gy.shape();

        if self.needs(x) {
            // Forward scattered x[ci, iy, ix] * w onto y; the gradient gathers
            // the same taps back.
            let mut gx = Tensor::zeros(xs);
            for n in 0..xs.n {
                for ci in 0..xs.c {
                    let g = ci / icg;
                    for iy in 0..xs.h {
                        for ix in 0..xs.w {
                            let mut acc = T::zero();
                            for og in 0..ocg {
                                let oc = g * ocg + og;
                                let gp = gy.plane(n, oc);
                                for ky in 0..kh {
                                    let oy =
                                        (iy * cfg.stride.0 + ky) as isize - cfg.padding.0 as isize;
                                    if oy < 0 || oy >= gys.h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ox = (ix * cfg.stride.1 + kx) as isize
                                            - cfg.padding.1 as isize;
                                        if ox < 0 || ox >= gys.w as isize {
                                            continue;
                                        }
                                        acc += gp[oy as usize * gys.w + ox as usize]
                                            * wt.at(ci, og, ky, kx);
                                    }
                                }
                            }
                            *gx.at_mut(n, ci, iy, ix) = acc;
                        }
                    }
                }
            }
            Self::accumulate(grads, x, gx)?;
        }
        if self.needs(w) {
            let mut gw = Tensor::zeros(ws);
            for ci in 0..xs.c {
                let g = ci / icg;
                for og in 0..ocg {
                    let oc = g * ocg + og;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut acc = T::zero();
                            for n in 0..xs.n {
                                let xp = xt.plane(n, ci);
                                let gp = gy.plane(n, oc);
                                for iy in 0..xs.h {
                                    let oy =
                                        (iy * cfg.stride.0 + ky) as isize - cfg.padding.0 as isize;
                                    if oy < 0 || oy >= gys.h as isize {
                                        continue;
                                    }
                                    for ix in 0..xs.w {
                                        let ox = (ix * cfg.stride.1 + kx) as isize
                                            - cfg.padding.1 as isize;
                                        if ox < 0 || ox >= gys.w as isize {
                                            continue;
                                        }
                                        acc += xp[iy * xs.w + ix]
                                            * gp[oy as usize * gys.w + ox as usize];
                                    }
                                }
                            }
                            *gw.at_mut(ci, og, ky, kx) = acc;
                        }
                    }
                }
            }
            Self::accumulate(grads, w, gw)?;
        }
        if let Some(bv) = bias {
            if self.needs(bv) {
                Self::accumulate(grads, bv, channel_sums(gy, self.tensor(bv).shape())?)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &self,
        x: Value,
        gamma: Value,
        beta: Value,
        mean: &[T],
        inv_std: &[T],
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let xt = self.tensor(x);
        let xs = xt.shape();
        let count = lit::<T>((xs.n * xs.h * xs.w) as f64);
        let gt = self.tensor(gamma);

        let mut sum_gy = vec![T::zero(); xs.c];
        let mut sum_gy_xhat = vec![T::zero(); xs.c];
        for c in 0..xs.c {
            for n in 0..xs.n {
                let gp = gy.plane(n, c);
                let xp = xt.plane(n, c);
                for (&g, &v) in gp.iter().zip(xp) {
                    sum_gy[c] += g;
                    sum_gy_xhat[c] += g * (v - mean[c]) * inv_std[c];
                }
            }
        }

        if self.needs(x) {
            let mut gx = Tensor::zeros(xs);
            for c in 0..xs.c {
                let scale = gt.at(0, c, 0, 0) * inv_std[c];
                let mean_gy = sum_gy[c] / count;
                let mean_gy_xhat = sum_gy_xhat[c] / count;
                for n in 0..xs.n {
                    let gp = gy.plane(n, c);
                    let xp = xt.plane(n, c);
                    let dst = gx.plane_mut(n, c);
                    for ((d, &g), &v) in dst.iter_mut().zip(gp).zip(xp) {
                        let xhat = (v - mean[c]) * inv_std[c];
                        *d = scale * (g - mean_gy - xhat * mean_gy_xhat);
                    }
                }
            }
            Self::accumulate(grads, x, gx)?;
        }
        if self.needs(gamma) {
            let mut gg = Tensor::zeros(Shape::new(1, xs.c, 1, 1));
            for c in 0..xs.c {
                *gg.at_mut(0, c, 0, 0) = sum_gy_xhat[c];
            }
            Self::accumulate(grads, gamma, gg)?;
        }
        if self.needs(beta) {
            let mut gb = Tensor::zeros(Shape::new(1, xs.c, 1, 1));
            for c in 0..xs.c {
                *gb.at_mut(0, c, 0, 0) = sum_gy[c];
            }
            Self::accumulate(grads, beta, gb)?;
        }
        Ok(())
    }

    fn layer_norm_backward(
        &self,
        x: Value,
        gamma: Value,
        beta: Value,
        epsilon: f64,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let xt = self.tensor(x);
        let gt = self.tensor(gamma);
        let s = xt.shape();
        let inv_c = T::one() / lit::<T>(s.c as f64);

        let mut gx = Tensor::zeros(s);
        let mut gg = Tensor::zeros(Shape::new(1, s.c, 1, 1));
        let mut gb = Tensor::zeros(Shape::new(1, s.c, 1, 1));
        for n in 0..s.n {
            let mut mean = T::zero();
            for c in 0..s.c {
                mean += xt.at(n, c, 0, 0);
            }
            mean = mean * inv_c;
            let mut var = T::zero();
            for c in 0..s.c {
                let d = xt.at(n, c, 0, 0) - mean;
                var += d * d;
            }
            var = var * inv_c;
            let inv_std = T::one() / (var + lit::<T>(epsilon)).sqrt();

            let mut mean_h = T::zero(); // mean of gamma * gy
            let mut mean_h_xhat = T::zero();
            for c in 0..s.c {
                let xhat = (xt.at(n, c, 0, 0) - mean) * inv_std;
                let h = gt.at(0, c, 0, 0) * gy.at(n, c, 0, 0);
                mean_h += h;
                mean_h_xhat += h * xhat;
            }
            mean_h = mean_h * inv_c;
            mean_h_xhat = mean_h_xhat * inv_c;

            for c in 0..s.c {
                let xhat = (xt.at(n, c, 0, 0) - mean) * inv_std;
                let h = gt.at(0, c, 0, 0) * gy.at(n, c, 0, 0);
                *gx.at_mut(n, c, 0, 0) = inv_std * (h - mean_h - xhat * mean_h_xhat);
                *gg.at_mut(0, c, 0, 0) += gy.at(n, c, 0, 0) * xhat;
                *gb.at_mut(0, c, 0, 0) += gy.at(n, c, 0, 0);
            }
        }
        if self.needs(x) {
            Self::accumulate(grads, x, gx)?;
        }
        if self.needs(gamma) {
            Self::accumulate(grads, gamma, gg)?;
        }
        if self.needs(beta) {
            Self::accumulate(grads, beta, gb)?;
        }
        Ok(())
    }
}

fn channel_sums<T: Scalar>(gy: &Tensor<T>, target_shape: Shape) -> Result<Tensor<T>> {
    let gys = gy.shape();
    let mut out = Tensor::zeros(target_shape);
    for o in 0..gys.c {
        let mut acc = T::zero();
        for n in 0..gys.n {
            for &g in gy.plane(n, o) {
                acc += g;
            }
        }
        out.data_mut()[o] = acc;
    }
    Ok(out)
}

/// Gradient table produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Value) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Value) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// First/second moment state for one parameter under Adam.
#[derive(Clone, Debug, Default)]
pub struct AdamMoments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

/// One Adam update with bias correction. `lr = 0` leaves the parameters
/// untouched (the moments still advance).
pub fn adam_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    state: &mut AdamMoments<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if param.len() != grad.len() {
        return Err(Error::shape(format!(
            "adam_step: param length {} != grad length {}",
            param.len(),
            grad.len()
        )));
    }
    if lr < 0.0 {
        return Err(Error::invalid("adam_step: lr must be >= 0"));
    }
    if state.m.is_empty() {
        state.m = vec![T::zero(); param.len()];
        state.v = vec![T::zero(); param.len()];
    }
    if state.m.len() != param.len() {
        return Err(Error::shape("adam_step: moment length mismatch"));
    }
    state.step += 1;
    let b1 = lit::<T>(beta1);
    let b2 = lit::<T>(beta2);
    let one = T::one();
    let bc1 = one - lit::<T>(beta1.powi(state.step as i32));
    let bc2 = one - lit::<T>(beta2.powi(state.step as i32));
    let lr_t = lit::<T>(lr);
    let eps_t = lit::<T>(eps);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] = param[i] - lr_t * m_hat / (v_hat.sqrt() + eps_t);
    }
    Ok(())
}

/// Adam over a named parameter set.
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moments: HashMap<String, AdamMoments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moments: HashMap::new(),
        }
    }

    pub fn update(&mut self, name: &str, param: &mut [T], grad: &[T]) -> Result<()> {
        let state = self.moments.entry(name.to_string()).or_default();
        adam_step(param, grad, state, self.lr, self.beta1, self.beta2, self.eps)
    }
}

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub epsilon: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Compare analytic gradients against central finite differences
/// `(f(x+eps) - f(x-eps)) / (2 eps)` per coordinate of every leaf.
///
/// Relative error is `|a - n| / max(|a|, |n|, 0.01)`; a formula bug shows up
/// at gradient scale, far above the floor. Failures are reported in the
/// result, never panicked.
pub fn grad_check<F>(
    op: &str,
    leaves: &[Tensor<f64>],
    eps: f64,
    threshold: f64,
    build: F,
) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Value]) -> Result<Value>,
{
    let fail = |msg: String| GradCheckReport {
        op: msg,
        max_rel_err: f64::INFINITY,
        epsilon: eps,
        threshold,
        pass: false,
    };

    let run = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vals: Vec<Value> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &vals)?;
        Ok(tape.tensor(root).data()[0])
    };

    let analytic: Result<Vec<Tensor<f64>>> = (|| {
        let mut tape = Tape::new();
        let vals: Vec<Value> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &vals)?;
        let mut grads = tape.backward(root)?;
        Ok(vals
            .iter()
            .map(|&v| grads.take(v).expect("leaf gradient"))
            .collect())
    })();

    let analytic = match analytic {
        Ok(g) => g,
        Err(e) => return fail(format!("{op} (build failed: {e})")),
    };

    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor<f64>> = leaves.to_vec();
    for li in 0..leaves.len() {
        for i in 0..leaves[li].numel() {
            let orig = work[li].data()[i];
            work[li].data_mut()[i] = orig + eps;
            let plus = run(&work);
            work[li].data_mut()[i] = orig - eps;
            let minus = run(&work);
            work[li].data_mut()[i] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                _ => return fail(format!("{op} (probe failed)")),
            };
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[li].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }

    GradCheckReport {
        op: op.to_string(),
        max_rel_err: max_rel,
        epsilon: eps,
        threshold,
        pass: max_rel <= threshold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rand_tensor;

    #[test]
    fn relu_sum_gradient_is_ones_for_positive_input() {
        let x = Tensor::<f64>::full(Shape::new(1, 2, 3, 3), 1.5);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let r = tape.relu(xv);
        let loss = tape.sum(r);
        let mut grads = tape.backward(loss).unwrap();
        let g = grads.take(xv).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mse_gradient_matches_analytic_form() {
        let x = rand_tensor::<f64>(Shape::new(1, 1, 2, 3), 3);
        let t = rand_tensor::<f64>(Shape::new(1, 1, 2, 3), 4);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let tv = tape.constant(t.clone());
        let loss = tape.mse_loss(xv, tv).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let g = grads.take(xv).unwrap();
        let n = x.numel() as f64;
        for i in 0..x.numel() {
            let want = 2.0 * (x.data()[i] - t.data()[i]) / n;
            assert!((g.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(rand_tensor(Shape::new(1, 1, 2, 2), 5));
        let err = tape.backward(x).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(rand_tensor(Shape::new(1, 1, 2, 2), 6));
        let unused = tape.leaf(rand_tensor(Shape::new(1, 1, 3, 3), 7));
        let loss = tape.sum(x);
        let mut grads = tape.backward(loss).unwrap();
        let g = grads.take(unused).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let x = rand_tensor::<f64>(Shape::new(1, 2, 3, 3), 8);
        let (a, b) = (2.5, -1.25);

        let grad_of = |fa: f64, fb: f64| -> Tensor<f64> {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let r = tape.relu(xv);
            let l1 = tape.sum(r);
            let sq = tape.mul(xv, xv).unwrap();
            let l2 = tape.sum(sq);
            let s1 = tape.scale(l1, fa);
            let s2 = tape.scale(l2, fb);
            let total = tape.add(s1, s2).unwrap();
            let mut grads = tape.backward(total).unwrap();
            grads.take(xv).unwrap()
        };

        let g_combined = grad_of(a, b);
        let g1 = grad_of(1.0, 0.0);
        let g2 = grad_of(0.0, 1.0);
        for i in 0..x.numel() {
            let want = a * g1.data()[i] + b * g2.data()[i];
            assert!((g_combined.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_gradient_matches_finite_differences() {
        let x = rand_tensor::<f64>(Shape::new(1, 2, 5, 5), 11);
        let w = rand_tensor::<f64>(Shape::new(3, 2, 3, 3), 12);
        let b = rand_tensor::<f64>(Shape::new(1, 3, 1, 1), 13);
        let report = grad_check("conv2d", &[x, w, b], 1e-4, 1e-5, |tape, vals| {
            let y = tape.conv2d(vals[0], vals[1], Some(vals[2]), (1, 1), (1, 1), 1)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        });
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn strided_conv2d_gradient_matches_finite_differences() {
        let x = rand_tensor::<f64>(Shape::new(2, 2, 6, 5), 21);
        let w = rand_tensor::<f64>(Shape::new(2, 1, 3, 3), 22);
        let report = grad_check("conv2d s2 grouped", &[x, w], 1e-4, 1e-5, |tape, vals| {
            let y = tape.conv2d(vals[0], vals[1], None, (2, 2), (1, 1), 2)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        });
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn grouped_conv_transpose_gradient_matches_finite_differences() {
        let x = rand_tensor::<f64>(Shape::new(1, 4, 3, 3), 14);
        let w = rand_tensor::<f64>(Shape::new(4, 2, 4, 4), 15);
        let report = grad_check("conv_transpose2d", &[x, w], 1e-4, 1e-5, |tape, vals| {
            let y = tape.conv_transpose2d(vals[0], vals[1], None, (2, 2), (1, 1), 2, (0, 0))?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        });
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn batch_norm_train_gradient_matches_finite_differences() {
        let x = rand_tensor::<f64>(Shape::new(2, 3, 4, 4), 16);
        let gamma = rand_tensor::<f64>(Shape::new(1, 3, 1, 1), 17);
        let beta = rand_tensor::<f64>(Shape::new(1, 3, 1, 1), 18);
        let report = grad_check("batch_norm", &[x, gamma, beta], 1e-4, 1e-5, |tape, vals| {
            let (y, _, _) = tape.batch_norm(vals[0], vals[1], vals[2], 1e-5)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        });
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn softmax_and_pool_gradients_match_finite_differences() {
        let x = rand_tensor::<f64>(Shape::new(1, 2, 4, 4), 19);
        let report = grad_check("spatial_softmax", &[x.clone()], 1e-5, 1e-5, |tape, vals| {
            let s = tape.spatial_softmax(vals[0], 3.0)?;
            let sq = tape.mul(s, s)?;
            Ok(tape.sum(sq))
        });
        assert!(report.pass, "softmax max rel err {}", report.max_rel_err);

        let report = grad_check("max_pool2d", &[x], 1e-5, 1e-5, |tape, vals| {
            let y = tape.max_pool2d(vals[0], (3, 3), (2, 2), (1, 1))?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        });
        assert!(report.pass, "max_pool max rel err {}", report.max_rel_err);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut p = vec![1.0f64, -2.0, 3.0];
        let g = vec![0.0; 3];
        let mut st = AdamMoments::default();
        adam_step(&mut p, &g, &mut st, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_lr_zero_is_identity() {
        let mut p = vec![0.5f64, 0.25];
        let g = vec![1.0, -1.0];
        let mut st = AdamMoments::default();
        adam_step(&mut p, &g, &mut st, 0.0, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p, vec![0.5, 0.25]);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut p = vec![0.0f64];
        let g = vec![1.0];
        let mut st = AdamMoments::default();
        adam_step(&mut p, &g, &mut st, 0.01, 0.9, 0.999, 1e-8).unwrap();
        // bias-corrected mhat = vhat = 1, so the step is lr/(1 + eps)
        assert!((p[0].abs() - 0.01).abs() < 1e-9, "step {}", p[0]);
    }

    #[test]
    fn adam_two_step_trace_matches_hand_computation() {
        // w0 = 0.5, lr = 0.1, defaults, gradients 1.0 then 0.5
        let mut p = vec![0.5f64];
        let mut st = AdamMoments::default();
        adam_step(&mut p, &[1.0], &mut st, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert!((p[0] - 0.400000001).abs() < 1e-12, "after step 1: {}", p[0]);
        adam_step(&mut p, &[0.5], &mut st, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert!(
            (p[0] - 0.3067820382981611).abs() < 1e-12,
            "after step 2: {}",
            p[0]
        );
    }

    #[test]
    fn adam_shape_mismatch_is_rejected() {
        let mut p = vec![0.0f64; 2];
        let mut st = AdamMoments::default();
        assert!(adam_step(&mut p, &[1.0], &mut st, 0.1, 0.9, 0.999, 1e-8).is_err());
    }
}
