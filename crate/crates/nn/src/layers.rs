//! Parameterised layers. Layers only hold [`ParamId`]s and hyperparameters;
//! weights live in a [`ParamStore`] so optimizers and checkpoints see a
//! single flat list.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Activation, Graph, NodeId};
use crate::kernels::same_pad;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry<T> {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    #[serde(skip, default = "default_rng")]
    rng: ChaCha8Rng,
}

fn default_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), trainable: true, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), trainable: false, value });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.rng.gen_range(-bound..=bound))).collect();
        self.add(name, Tensor::from_vec(shape, data))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len()).filter(|&i| self.entries[i].trainable).map(ParamId).collect()
    }

    pub fn leaf(&self, g: &mut Graph<T>, id: ParamId) -> NodeId {
        g.param(id, self.get(id))
    }

    /// Folds training-mode batch statistics into running averages.
    pub fn update_running_stats(&mut self, g: &Graph<T>, momentum: f64) {
        let m = T::lit(momentum);
        for rec in g.bn_records() {
            let mean_id = ParamId(rec.key);
            let var_id = ParamId(rec.key + 1);
            for (r, &b) in self.get_mut(mean_id).data_mut().iter_mut().zip(&rec.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, &b) in self.get_mut(var_id).data_mut().iter_mut().zip(&rec.var) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }

    /// Element-type conversion, keeping names and layout.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), trainable: e.trainable, value: e.value.cast() })
                .collect(),
            rng: self.rng.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Running variance lives at `running_mean + 1`.
    pub running_mean: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        let running_mean = store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        let running_var = store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one()));
        debug_assert_eq!(running_var.0, running_mean.0 + 1);
        Self { gamma, beta, running_mean, channels }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, g: &mut Graph<T>, x: NodeId) -> NodeId {
        let gamma = store.leaf(g, self.gamma);
        let beta = store.leaf(g, self.beta);
        let rm = store.get(self.running_mean).data();
        let rv = store.get(ParamId(self.running_mean.0 + 1)).data();
        g.batch_norm(x, gamma, beta, (rm, rv), self.running_mean.0)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Affine {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, inputs: usize, outputs: usize) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let w = store.add_uniform(format!("{name}.w"), &[outputs, inputs], bound);
        let b = store.add_uniform(format!("{name}.b"), &[outputs], bound);
        Self { w, b, inputs, outputs }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, g: &mut Graph<T>, x: NodeId) -> NodeId {
        let w = store.leaf(g, self.w);
        let b = store.leaf(g, self.b);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }

    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvKind {
    Standard { k: usize, stride: usize },
    Depthwise { k: usize, stride: usize },
    Pointwise,
}

/// Convolution followed by batch norm (or a bias when norm is disabled) and
/// an activation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvBn {
    pub kind: ConvKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub w: ParamId,
    pub bn: Option<BatchNorm>,
    pub bias: Option<ParamId>,
    pub act: Activation,
}

impl ConvBn {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: ConvKind,
        in_ch: usize,
        out_ch: usize,
        norm: bool,
        act: Activation,
    ) -> Self {
        let (shape, fan_in) = match kind {
            ConvKind::Standard { k, .. } => (vec![out_ch, in_ch, k, k], in_ch * k * k),
            ConvKind::Depthwise { k, .. } => {
                assert_eq!(in_ch, out_ch, "depthwise keeps channel count");
                (vec![in_ch, k, k], k * k)
            }
            ConvKind::Pointwise => (vec![out_ch, in_ch], in_ch),
        };
        let gain = match act {
            Activation::Identity | Activation::Sigmoid => 1.0,
            _ => 2.0,
        };
        let w = store.add_uniform(format!("{name}.w"), &shape, (3.0 * gain / fan_in as f64).sqrt());
        let (bn, bias) = if norm {
            (Some(BatchNorm::new(store, &format!("{name}.bn"), out_ch)), None)
        } else {
            (None, Some(store.add(format!("{name}.b"), Tensor::zeros(&[out_ch]))))
        };
        Self { kind, in_ch, out_ch, w, bn, bias, act }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, g: &mut Graph<T>, x: NodeId) -> NodeId {
        let w = store.leaf(g, self.w);
        let y = match self.kind {
            ConvKind::Standard { k, stride } => g.conv2d(x, w, stride, same_pad(k)),
            ConvKind::Depthwise { k, stride } => g.depthwise(x, w, stride, same_pad(k)),
            ConvKind::Pointwise => g.pointwise(x, w),
        };
        let y = match (&self.bn, self.bias) {
            (Some(bn), _) => bn.forward(store, g, y),
            (None, Some(b)) => {
                let b = store.leaf(g, b);
                g.add_bias(y, b)
            }
            (None, None) => y,
        };
        g.act(y, self.act)
    }

    pub fn stride(&self) -> usize {
        match self.kind {
            ConvKind::Standard { stride, .. } | ConvKind::Depthwise { stride, .. } => stride,
            ConvKind::Pointwise => 1,
        }
    }

    pub fn param_count(&self) -> usize {
        let w = match self.kind {
            ConvKind::Standard { k, .. } => self.in_ch * self.out_ch * k * k,
            ConvKind::Depthwise { k, .. } => self.in_ch * k * k,
            ConvKind::Pointwise => self.in_ch * self.out_ch,
        };
        w + self.bn.as_ref().map_or(self.out_ch, BatchNorm::param_count)
    }
}

/// Expand (1x1) -> depthwise (k x k) -> linear project (1x1), with an
/// identity skip exactly when `stride == 1` and channel counts match.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvertedResidual {
    pub expand: Option<ConvBn>,
    pub depthwise: ConvBn,
    pub project: ConvBn,
    pub residual: bool,
}

impl InvertedResidual {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        expansion: usize,
        k: usize,
        stride: usize,
        norm: bool,
        act: Activation,
    ) -> Self {
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
        let hidden = in_ch * expansion;
        let expand = (expansion != 1).then(|| {
            ConvBn::new(store, &format!("{name}.expand"), ConvKind::Pointwise, in_ch, hidden, norm, act)
        });
        let depthwise = ConvBn::new(
            store,
            &format!("{name}.dw"),
            ConvKind::Depthwise { k, stride },
            hidden,
            hidden,
            norm,
            act,
        );
        let project = ConvBn::new(
            store,
            &format!("{name}.project"),
            ConvKind::Pointwise,
            hidden,
            out_ch,
            norm,
            Activation::Identity,
        );
        Self { expand, depthwise, project, residual: stride == 1 && in_ch == out_ch }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, g: &mut Graph<T>, x: NodeId) -> NodeId {
        let mut h = x;
        if let Some(e) = &self.expand {
            h = e.forward(store, g, h);
        }
        h = self.depthwise.forward(store, g, h);
        h = self.project.forward(store, g, h);
        if self.residual {
            g.add(x, h)
        } else {
            h
        }
    }

    pub fn param_count(&self) -> usize {
        self.expand.as_ref().map_or(0, ConvBn::param_count)
            + self.depthwise.param_count()
            + self.project.param_count()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Block {
    Conv(ConvBn),
    InvRes(InvertedResidual),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Sequential {
    pub blocks: Vec<Block>,
}

impl Sequential {
    pub fn push(&mut self, b: Block) {
        self.blocks.push(b);
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, g: &mut Graph<T>, x: NodeId) -> NodeId {
        self.blocks.iter().fold(x, |h, b| match b {
            Block::Conv(c) => c.forward(store, g, h),
            Block::InvRes(r) => r.forward(store, g, h),
        })
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match b {
                Block::Conv(c) => c.param_count(),
                Block::InvRes(r) => r.param_count(),
            })
            .sum()
    }
}

/// Depthwise k x k followed by pointwise mixing, without norm or activation.
pub fn depthwise_separable<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    dw: NodeId,
    pw: NodeId,
    stride: usize,
) -> NodeId {
    let k = g.shape(dw)[1];
    let h = g.depthwise(x, dw, stride, same_pad(k));
    g.pointwise(h, pw)
}
