//! Eager tape: every op computes its value immediately and records enough
//! to run the reverse pass. A graph is built per mini-batch and dropped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kernels::{self, ConvGeom};
use crate::layers::ParamId;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Relu6,
    LeakyRelu,
    Sigmoid,
    Silu,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::Relu6 => x.max(T::zero()).min(T::lit(6.0)),
            Activation::LeakyRelu => {
                if x > T::zero() {
                    x
                } else {
                    x * T::lit(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Silu => x * sigmoid(x),
        }
    }

    /// Derivative given the input `x` and output `y`.
    #[inline]
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Relu6 => {
                if x > T::zero() && x < T::lit(6.0) {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::lit(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Silu => {
                // sigmoid(x) = y / x away from zero, which avoids a second exp
                let s = if x.abs() > T::lit(1e-3) { y / x } else { sigmoid(x) };
                s * (T::one() + x * (T::one() - s))
            }
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[derive(Debug)]
enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        geom: ConvGeom,
    },
    Depthwise {
        x: NodeId,
        w: NodeId,
        geom: ConvGeom,
    },
    Pointwise {
        x: NodeId,
        w: NodeId,
        in_ch: usize,
        out_ch: usize,
    },
    AddBias {
        x: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Act {
        x: NodeId,
        kind: Activation,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    /// `x [n, in] * w[out, in]^T`
    MatMul {
        x: NodeId,
        w: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    ScaleShift {
        x: NodeId,
        scale: T,
    },
    L1Loss {
        pred: NodeId,
        target: Vec<T>,
    },
    WeightedSum {
        x: NodeId,
        weights: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, keyed by the
/// caller so running averages can be updated after the forward pass.
#[derive(Debug, Clone)]
pub struct BnRecord<T> {
    pub key: usize,
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    rng: ChaCha8Rng,
    bn_records: Vec<BnRecord<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_records: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last `backward` target with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].value.grad()
    }

    pub fn bn_records(&self) -> &[BnRecord<T>] {
        &self.bn_records
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        let needs_grad = op_parents(&op).iter().any(|p| self.nodes[p.0].needs_grad);
        self.push_leaf(op, value, needs_grad)
    }

    fn push_leaf(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable input; its gradient is available after `backward`.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push_leaf(Op::Leaf { param: None }, t, true)
    }

    /// A non-differentiable input. Gradients are neither stored for it nor
    /// computed for work that depends only on constants.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push_leaf(Op::Leaf { param: None }, t, false)
    }

    pub fn param(&mut self, id: ParamId, t: &Tensor<T>) -> NodeId {
        self.push_leaf(Op::Leaf { param: Some(id) }, t.clone(), true)
    }

    /// Gradients of every parameter leaf after `backward`, in creation order.
    pub fn param_grads(&self) -> Vec<(ParamId, &[T])> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Leaf { param: Some(p) } => n.value.grad().map(|g| (p, g)),
                _ => None,
            })
            .collect()
    }

    fn dims4(&self, x: NodeId) -> (usize, usize, usize, usize) {
        let s = self.shape(x);
        assert_eq!(s.len(), 4, "expected [n, c, h, w], got {s:?}");
        (s[0], s[1], s[2], s[3])
    }

    /// Standard convolution; `w` is `[out, in, k, k]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let (n, c, h, wd) = self.dims4(x);
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[1], c, "conv2d input channels");
        assert_eq!(ws[2], ws[3]);
        let geom = ConvGeom { batch: n, in_ch: c, out_ch: ws[0], h, w: wd, k: ws[2], stride, pad };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let t = Tensor::from_vec(&[n, ws[0], geom.out_h(), geom.out_w()], out);
        self.push(Op::Conv2d { x, w, geom }, t)
    }

    /// Per-channel convolution; `w` is `[c, k, k]`.
    pub fn depthwise(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let (n, c, h, wd) = self.dims4(x);
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 3);
        assert_eq!(ws[0], c, "depthwise channels");
        let geom = ConvGeom { batch: n, in_ch: c, out_ch: c, h, w: wd, k: ws[1], stride, pad };
        let out = kernels::depthwise_forward(self.value(x).data(), self.value(w).data(), &geom);
        let t = Tensor::from_vec(&[n, c, geom.out_h(), geom.out_w()], out);
        self.push(Op::Depthwise { x, w, geom }, t)
    }

    /// 1x1 convolution; `w` is `[out, in]`.
    pub fn pointwise(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (n, c, h, wd) = self.dims4(x);
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[1], c, "pointwise input channels");
        let out = kernels::pointwise_forward(self.value(x).data(), self.value(w).data(), n, c, ws[0], h * wd);
        let t = Tensor::from_vec(&[n, ws[0], h, wd], out);
        self.push(Op::Pointwise { x, w, in_ch: c, out_ch: ws[0] }, t)
    }

    /// Adds `b[c]` along axis 1 of a `[n, c, ...]` tensor.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        let c = s[1];
        assert_eq!(self.value(b).len(), c, "bias length");
        let inner: usize = s[2..].iter().product();
        let mut out = self.value(x).data().to_vec();
        let bv = self.value(b).data();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let bias = bv[i % c];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let t = Tensor::from_vec(&s, out);
        self.push(Op::AddBias { x, b }, t)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add operands");
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::from_vec(self.shape(a), out);
        self.push(Op::Add { a, b }, t)
    }

    pub fn act(&mut self, x: NodeId, kind: Activation) -> NodeId {
        if kind == Activation::Identity {
            return x;
        }
        let t = self.value(x).map(|v| kind.apply(v));
        self.push(Op::Act { x, kind }, t)
    }

    /// `[n, c, h, w] -> [n, c]`
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = self.dims4(x);
        let plane = h * w;
        let inv = T::one() / T::lit(plane as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        self.push(Op::GlobalAvgPool { x }, Tensor::from_vec(&[n, c], out))
    }

    /// `x [n, in]`, `w [out, in]` -> `[n, out]`
    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2);
        assert_eq!(ws.len(), 2);
        assert_eq!(xs[1], ws[1], "matmul inner dimension");
        let (n, k, m) = (xs[0], xs[1], ws[0]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let xr = &xv[i * k..(i + 1) * k];
            for j in 0..m {
                let wr = &wv[j * k..(j + 1) * k];
                out[i * m + j] = xr.iter().zip(wr).map(|(&a, &b)| a * b).sum();
            }
        }
        self.push(Op::MatMul { x, w }, Tensor::from_vec(&[n, m], out))
    }

    /// Batch norm over every axis except 1. In train mode batch statistics
    /// are used and recorded under `key`; in eval mode `running` is used.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: (&[T], &[T]),
        key: usize,
    ) -> NodeId {
        let s = self.shape(x).to_vec();
        let c = s[1];
        let inner: usize = s[2..].iter().product();
        let n = s[0];
        let count = n * inner;
        let eps = T::lit(BN_EPS);
        let mut record = None;
        let xv = self.nodes[x.0].value.data();
        let (mean, var) = if self.mode == Mode::Train {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for (i, chunk) in xv.chunks(inner).enumerate() {
                mean[i % c] += chunk.iter().copied().sum::<T>();
            }
            let inv_count = T::one() / T::lit(count as f64);
            mean.iter_mut().for_each(|m| *m *= inv_count);
            for (i, chunk) in xv.chunks(inner).enumerate() {
                let m = mean[i % c];
                var[i % c] += chunk.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
            }
            let unbiased: Vec<T> = var
                .iter()
                .map(|&v| if count > 1 { v / T::lit((count - 1) as f64) } else { T::zero() })
                .collect();
            var.iter_mut().for_each(|v| *v *= inv_count);
            record = Some(BnRecord { key, mean: mean.clone(), var: unbiased });
            (mean, var)
        } else {
            (running.0.to_vec(), running.1.to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for (i, (chunk, (xh, o))) in xv
            .chunks(inner)
            .zip(xhat.chunks_mut(inner).zip(out.chunks_mut(inner)))
            .enumerate()
        {
            let ch = i % c;
            for ((&v, h), y) in chunk.iter().zip(xh.iter_mut()).zip(o.iter_mut()) {
                *h = (v - mean[ch]) * inv_std[ch];
                *y = g[ch] * *h + b[ch];
            }
        }
        let batch_stats = self.mode == Mode::Train;
        self.bn_records.extend(record);
        self.push(
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats },
            Tensor::from_vec(&s, out),
        )
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> NodeId {
        if self.mode == Mode::Eval || p <= 0.0 {
            return x;
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let len = self.value(x).len();
        let mask: Vec<T> = (0..len)
            .map(|_| if self.rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out: Vec<T> = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::from_vec(self.shape(x), out);
        self.push(Op::Dropout { x, mask }, t)
    }

    /// Concatenates `[n, f_i]` tensors along axis 1.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let n = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(s.len(), 2, "concat expects [n, f]");
                assert_eq!(s[0], n, "concat batch size");
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Op::Concat { parts: parts.to_vec() }, Tensor::from_vec(&[n, total], out))
    }

    /// `x * scale + shift` with constant scale and shift.
    pub fn scale_shift(&mut self, x: NodeId, scale: T, shift: T) -> NodeId {
        let t = self.value(x).map(|v| v * scale + shift);
        self.push(Op::ScaleShift { x, scale }, t)
    }

    /// Mean absolute error between `pred` (any shape) and `target`.
    pub fn l1_loss(&mut self, pred: NodeId, target: &[T]) -> NodeId {
        let p = self.value(pred).data();
        assert_eq!(p.len(), target.len(), "l1 target length");
        let n = T::lit(p.len() as f64);
        let loss = p.iter().zip(target).map(|(&a, &b)| (a - b).abs()).sum::<T>() / n;
        self.push(Op::L1Loss { pred, target: target.to_vec() }, Tensor::scalar(loss))
    }

    /// `sum(x * weights)`, a scalar probe for gradient checks.
    pub fn weighted_sum(&mut self, x: NodeId, weights: &[T]) -> NodeId {
        let v = self.value(x).data();
        assert_eq!(v.len(), weights.len());
        let s = v.iter().zip(weights).map(|(&a, &b)| a * b).sum();
        self.push(Op::WeightedSum { x, weights: weights.to_vec() }, Tensor::scalar(s))
    }

    /// Reverse pass from a scalar node. Gradients land in each node's
    /// tensor gradient slot; constants and nodes that depend only on
    /// constants are skipped.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(self.value(root).len(), 1, "backward from non-scalar");
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
        if !self.nodes[root.0].needs_grad {
            return;
        }
        self.nodes[root.0].value.grad_mut()[0] = T::one();
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(dy) = self.nodes[idx].value.take_grad() else { continue };
            self.backprop_node(idx, &dy);
            self.nodes[idx].value.set_grad(dy);
        }
    }

    /// Takes a parent's gradient buffer for accumulation, or `None` when
    /// the parent needs no gradient.
    fn take(&mut self, id: NodeId) -> Option<Vec<T>> {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return None;
        }
        let n = node.value.len();
        Some(node.value.take_grad().unwrap_or_else(|| vec![T::zero(); n]))
    }

    fn restore(&mut self, id: NodeId, g: Option<Vec<T>>) {
        if let Some(g) = g {
            self.nodes[id.0].value.set_grad(g);
        }
    }

    fn accumulate_into(&mut self, id: NodeId, src: &[T]) {
        if self.nodes[id.0].needs_grad {
            accumulate(self.nodes[id.0].value.grad_mut(), src);
        }
    }

    fn backprop_node(&mut self, idx: usize, dy: &[T]) {
        // Parent gradients are taken out of their nodes while parent values
        // are read in place, then put back.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf { param: None });
        match &op {
            Op::Leaf { .. } => {}
            Op::Conv2d { x, w, geom } => {
                let (mut dx, mut dw) = (self.take(*x), self.take(*w));
                kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                self.restore(*x, dx);
                self.restore(*w, dw);
            }
            Op::Depthwise { x, w, geom } => {
                let (mut dx, mut dw) = (self.take(*x), self.take(*w));
                kernels::depthwise_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                self.restore(*x, dx);
                self.restore(*w, dw);
            }
            Op::Pointwise { x, w, in_ch, out_ch } => {
                let s = self.shape(*x);
                let (n, plane) = (s[0], s[2] * s[3]);
                let (mut dx, mut dw) = (self.take(*x), self.take(*w));
                kernels::pointwise_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy,
                    n,
                    *in_ch,
                    *out_ch,
                    plane,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                self.restore(*x, dx);
                self.restore(*w, dw);
            }
            Op::AddBias { x, b } => {
                let s = self.shape(*x);
                let c = s[1];
                let inner: usize = s[2..].iter().product();
                if let Some(mut db) = self.take(*b) {
                    for (i, chunk) in dy.chunks(inner).enumerate() {
                        db[i % c] += chunk.iter().copied().sum::<T>();
                    }
                    self.restore(*b, Some(db));
                }
                self.accumulate_into(*x, dy);
            }
            Op::Add { a, b } => {
                self.accumulate_into(*a, dy);
                self.accumulate_into(*b, dy);
            }
            Op::Act { x, kind } => {
                if let Some(mut dx) = self.take(*x) {
                    let xv = self.nodes[x.0].value.data();
                    let yv = self.nodes[idx].value.data();
                    for (((d, &xi), &yi), &g) in dx.iter_mut().zip(xv).zip(yv).zip(dy) {
                        *d += g * kind.derivative(xi, yi);
                    }
                    self.restore(*x, Some(dx));
                }
            }
            Op::GlobalAvgPool { x } => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let inv = T::one() / T::lit(plane as f64);
                if let Some(mut gx) = self.take(*x) {
                    for (chunk, &g) in gx.chunks_mut(plane).zip(dy) {
                        let v = g * inv;
                        chunk.iter_mut().for_each(|d| *d += v);
                    }
                    self.restore(*x, Some(gx));
                }
            }
            Op::MatMul { x, w } => {
                let (n, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let m = self.shape(*w)[0];
                let (mut dx, mut dw) = (self.take(*x), self.take(*w));
                let xv = self.nodes[x.0].value.data();
                let wv = self.nodes[w.0].value.data();
                for i in 0..n {
                    for j in 0..m {
                        let g = dy[i * m + j];
                        if g == T::zero() {
                            continue;
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            for (d, &wt) in dx[i * k..(i + 1) * k].iter_mut().zip(&wv[j * k..(j + 1) * k]) {
                                *d += g * wt;
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            for (d, &xt) in dw[j * k..(j + 1) * k].iter_mut().zip(&xv[i * k..(i + 1) * k]) {
                                *d += g * xt;
                            }
                        }
                    }
                }
                self.restore(*x, dx);
                self.restore(*w, dw);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let s = self.shape(*x);
                let c = s[1];
                let inner: usize = s[2..].iter().product();
                let count = T::lit((s[0] * inner) as f64);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (i, (dch, xh)) in dy.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                    let ch = i % c;
                    let (mut sg, mut sb) = (T::zero(), T::zero());
                    for (&g, &h) in dch.iter().zip(xh) {
                        sg += g * h;
                        sb += g;
                    }
                    dgamma[ch] += sg;
                    dbeta[ch] += sb;
                }
                if let Some(mut dx) = self.take(*x) {
                    let gv = self.nodes[gamma.0].value.data();
                    for (i, (dxc, (dch, xh))) in dx
                        .chunks_mut(inner)
                        .zip(dy.chunks(inner).zip(xhat.chunks(inner)))
                        .enumerate()
                    {
                        let ch = i % c;
                        let scale = gv[ch] * inv_std[ch];
                        if *batch_stats {
                            let mean_d = dbeta[ch] / count;
                            let mean_dh = dgamma[ch] / count;
                            for ((d, &g), &h) in dxc.iter_mut().zip(dch).zip(xh) {
                                *d += scale * (g - mean_d - h * mean_dh);
                            }
                        } else {
                            for (d, &g) in dxc.iter_mut().zip(dch) {
                                *d += scale * g;
                            }
                        }
                    }
                    self.restore(*x, Some(dx));
                }
                self.accumulate_into(*gamma, &dgamma);
                self.accumulate_into(*beta, &dbeta);
            }
            Op::Dropout { x, mask } => {
                if let Some(mut dx) = self.take(*x) {
                    for ((d, &g), &m) in dx.iter_mut().zip(dy).zip(mask) {
                        *d += g * m;
                    }
                    self.restore(*x, Some(dx));
                }
            }
            Op::Concat { parts } => {
                let n = self.shape(parts[0])[0];
                let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if let Some(mut gp) = self.take(p) {
                        for i in 0..n {
                            accumulate(&mut gp[i * w..(i + 1) * w], &dy[i * total + off..i * total + off + w]);
                        }
                        self.restore(p, Some(gp));
                    }
                    off += w;
                }
            }
            Op::ScaleShift { x, scale } => {
                if let Some(mut dx) = self.take(*x) {
                    for (d, &g) in dx.iter_mut().zip(dy) {
                        *d += g * *scale;
                    }
                    self.restore(*x, Some(dx));
                }
            }
            Op::L1Loss { pred, target } => {
                let n = T::lit(target.len() as f64);
                let g = dy[0] / n;
                if let Some(mut dx) = self.take(*pred) {
                    for ((d, &p), &t) in dx.iter_mut().zip(self.nodes[pred.0].value.data()).zip(target) {
                        let diff = p - t;
                        if diff > T::zero() {
                            *d += g;
                        } else if diff < T::zero() {
                            *d -= g;
                        }
                    }
                    self.restore(*pred, Some(dx));
                }
            }
            Op::WeightedSum { x, weights } => {
                if let Some(mut dx) = self.take(*x) {
                    for (d, &w) in dx.iter_mut().zip(weights) {
                        *d += w * dy[0];
                    }
                    self.restore(*x, Some(dx));
                }
            }
        }
        self.nodes[idx].op = op;
    }

    /// Direct parents of a node.
    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        op_parents(&self.nodes[id.0].op)
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        match &self.nodes[id.0].op {
            Op::Leaf { param: Some(_) } => "param",
            Op::Leaf { param: None } => "input",
            Op::Conv2d { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise",
            Op::Pointwise { .. } => "pointwise",
            Op::AddBias { .. } => "add_bias",
            Op::Add { .. } => "add",
            Op::Act { .. } => "act",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::MatMul { .. } => "matmul",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Dropout { .. } => "dropout",
            Op::Concat { .. } => "concat",
            Op::ScaleShift { .. } => "scale_shift",
            Op::L1Loss { .. } => "l1_loss",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }

    /// Number of elementwise `add` nodes (skip connections) in the graph.
    pub fn count_op(&self, name: &str) -> usize {
        (0..self.nodes.len()).filter(|&i| self.op_name(NodeId(i)) == name).count()
    }

    /// Whether `node` is reachable from `source` along forward edges.
    pub fn depends_on(&self, node: NodeId, source: NodeId) -> bool {
        if node.0 < source.0 {
            return false;
        }
        let mut reach = vec![false; node.0 + 1];
        reach[source.0] = true;
        for i in source.0 + 1..=node.0 {
            reach[i] = self.parents(NodeId(i)).iter().any(|p| p.0 >= source.0 && reach[p.0]);
        }
        reach[node.0]
    }
}

fn op_parents<T>(op: &Op<T>) -> Vec<NodeId> {
    match op {
        Op::Leaf { .. } => vec![],
        Op::Conv2d { x, w, .. } | Op::Depthwise { x, w, .. } | Op::Pointwise { x, w, .. } => vec![*x, *w],
        Op::AddBias { x, b } => vec![*x, *b],
        Op::Add { a, b } => vec![*a, *b],
        Op::Act { x, .. }
        | Op::GlobalAvgPool { x }
        | Op::Dropout { x, .. }
        | Op::ScaleShift { x, .. }
        | Op::WeightedSum { x, .. } => vec![*x],
        Op::MatMul { x, w } => vec![*x, *w],
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Concat { parts } => parts.clone(),
        Op::L1Loss { pred, .. } => vec![*pred],
    }
}

fn accumulate<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
