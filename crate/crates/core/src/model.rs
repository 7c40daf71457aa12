//! The landing-time regressor. A main image backbone and the tabular
//! vector feed a fused 64-d representation; an optional holding branch
//! (second backbone plus the holding vector) contributes an 8-d feature
//! before the final regression head.

pub use altnn::Activation;
use altnn::{
    Affine, BatchNorm, Block, ConvBn, ConvKind, Graph, InvertedResidual, NnError, NodeId, ParamStore,
    Scalar, Sequential, Tensor,
};
use serde::{Deserialize, Serialize};

use crate::dataset::{HOLDING_DIM, TABULAR_DIM};
use crate::error::{CoreError, Result};

/// One stage of inverted-residual blocks. Only the first block strides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub expansion: usize,
    pub channels: usize,
    pub repeats: usize,
    pub stride: usize,
    pub kernel: usize,
}

impl Stage {
    pub const fn new(expansion: usize, channels: usize, repeats: usize, stride: usize, kernel: usize) -> Self {
        Self { expansion, channels, repeats, stride, kernel }
    }
}

/// Stem conv (3x3, stride 2), stages, then a 1x1 head conv before pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stages: Vec<Stage>,
    pub head_channels: usize,
    pub act: Activation,
    pub norm: bool,
}

impl BackboneConfig {
    /// Small MobileNetV2-style stack for 64x64 inputs.
    pub fn desk_main() -> Self {
        Self {
            stem_channels: 8,
            stages: vec![Stage::new(1, 12, 1, 2, 3), Stage::new(3, 16, 1, 2, 3), Stage::new(3, 24, 1, 2, 3)],
            head_channels: 48,
            act: Activation::Relu6,
            norm: true,
        }
    }

    /// Small MBConv stack (swish, mixed 3/5 kernels) for 64x64 inputs.
    pub fn desk_holding() -> Self {
        Self {
            stem_channels: 8,
            stages: vec![Stage::new(1, 12, 1, 2, 3), Stage::new(3, 16, 1, 2, 5), Stage::new(3, 24, 1, 2, 3)],
            head_channels: 32,
            act: Activation::Silu,
            norm: true,
        }
    }

    /// MobileNetV2 at width 1.0.
    pub fn mobilenet_v2() -> Self {
        Self {
            stem_channels: 32,
            stages: vec![
                Stage::new(1, 16, 1, 1, 3),
                Stage::new(6, 24, 2, 2, 3),
                Stage::new(6, 32, 3, 2, 3),
                Stage::new(6, 64, 4, 2, 3),
                Stage::new(6, 96, 3, 1, 3),
                Stage::new(6, 160, 3, 2, 3),
                Stage::new(6, 320, 1, 1, 3),
            ],
            head_channels: 1280,
            act: Activation::Relu6,
            norm: true,
        }
    }

    /// EfficientNet-B0 stage table, without squeeze-and-excitation.
    pub fn efficientnet_b0() -> Self {
        Self {
            stem_channels: 32,
            stages: vec![
                Stage::new(1, 16, 1, 1, 3),
                Stage::new(6, 24, 2, 2, 3),
                Stage::new(6, 40, 2, 2, 5),
                Stage::new(6, 80, 3, 2, 3),
                Stage::new(6, 112, 3, 1, 5),
                Stage::new(6, 192, 4, 2, 5),
                Stage::new(6, 320, 1, 1, 3),
            ],
            head_channels: 1280,
            act: Activation::Silu,
            norm: true,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.stem_channels == 0 || self.head_channels == 0 {
            return Err(CoreError::Config(format!("{name}: channel counts must be positive")));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.expansion == 0 || s.channels == 0 || s.repeats == 0 || !(s.stride == 1 || s.stride == 2) {
                return Err(CoreError::Config(format!("{name}: stage {i} is malformed: {s:?}")));
            }
            if s.kernel % 2 == 0 {
                return Err(CoreError::Config(format!("{name}: stage {i} kernel must be odd")));
            }
        }
        Ok(())
    }

    fn build<T: Scalar>(&self, store: &mut ParamStore<T>, name: &str) -> Sequential {
        let mut seq = Sequential::default();
        let stem = ConvKind::Standard { k: 3, stride: 2 };
        seq.push(Block::Conv(ConvBn::new(store, &format!("{name}.stem"), stem, 3, self.stem_channels, self.norm, self.act)));
        let mut ch = self.stem_channels;
        for (i, s) in self.stages.iter().enumerate() {
            for r in 0..s.repeats {
                let stride = if r == 0 { s.stride } else { 1 };
                let block_name = format!("{name}.s{i}.b{r}");
                seq.push(Block::InvRes(InvertedResidual::new(
                    store, &block_name, ch, s.channels, s.expansion, s.kernel, stride, self.norm, self.act,
                )));
                ch = s.channels;
            }
        }
        seq.push(Block::Conv(ConvBn::new(
            store,
            &format!("{name}.head"),
            ConvKind::Pointwise,
            ch,
            self.head_channels,
            self.norm,
            self.act,
        )));
        seq
    }
}

/// Widths of the fully connected heads. Each `*_in` must equal the width
/// of the concatenation feeding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub main_embed: usize,
    pub holding_embed: usize,
    pub n1_in: usize,
    pub n1_out: usize,
    pub n2_in: usize,
    pub n2_hidden: usize,
    pub n2_out: usize,
    pub n3_in: usize,
    pub n3_out: usize,
    pub n4_in: usize,
    pub n4_out: usize,
    pub final_in: usize,
    pub dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            main_embed: 64,
            holding_embed: 32,
            n1_in: HOLDING_DIM,
            n1_out: 16,
            n2_in: 48,
            n2_hidden: 32,
            n2_out: 8,
            n3_in: TABULAR_DIM,
            n3_out: 16,
            n4_in: 80,
            n4_out: 64,
            final_in: 72,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub main: BackboneConfig,
    pub holding: BackboneConfig,
    pub heads: HeadConfig,
    pub ablate_holding: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            main: BackboneConfig::desk_main(),
            holding: BackboneConfig::desk_holding(),
            heads: HeadConfig::default(),
            ablate_holding: false,
            init_seed: 0,
        }
    }

    /// MobileNetV2 main branch and EfficientNet-B0 holding branch at 224x224.
    pub fn full_scale() -> Self {
        Self {
            image_size: 224,
            main: BackboneConfig::mobilenet_v2(),
            holding: BackboneConfig::efficientnet_b0(),
            ..Self::desk()
        }
    }

    /// Checks every concatenation edge against the head it feeds.
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(CoreError::Config(format!("image_size {} is too small", self.image_size)));
        }
        self.main.validate("main backbone")?;
        if !self.ablate_holding {
            self.holding.validate("holding backbone")?;
        }
        let h = &self.heads;
        if !(0.0..1.0).contains(&h.dropout) {
            return Err(CoreError::Config(format!("dropout {} outside [0, 1)", h.dropout)));
        }
        let edge = |name: &str, expected: usize, got: usize| -> Result<()> {
            if expected == got {
                Ok(())
            } else {
                Err(CoreError::Model(NnError::Shape {
                    edge: name.to_string(),
                    expected: vec![expected],
                    got: vec![got],
                }))
            }
        };
        edge("tabular -> mlp_n3", h.n3_in, TABULAR_DIM)?;
        edge("concat(main_embed, mlp_n3) -> mlp_n4", h.n4_in, h.main_embed + h.n3_out)?;
        if self.ablate_holding {
            edge("mlp_n4 -> final", h.final_in, h.n4_out)?;
        } else {
            edge("holding_vector -> mlp_n1", h.n1_in, HOLDING_DIM)?;
            edge("concat(holding_embed, mlp_n1) -> mlp_n2", h.n2_in, h.holding_embed + h.n1_out)?;
            edge("concat(mlp_n4, mlp_n2) -> final", h.final_in, h.n4_out + h.n2_out)?;
        }
        Ok(())
    }

    /// Same config with the holding branch removed and the final head
    /// narrowed to match.
    pub fn ablated(&self) -> Self {
        let mut c = self.clone();
        c.ablate_holding = true;
        c.heads.final_in = c.heads.n4_out;
        c
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HoldingBranch {
    backbone: Sequential,
    embed: Affine,
    n1: Affine,
    n2a: Affine,
    n2_bn: BatchNorm,
    n2b: Affine,
}

/// Weights plus layer wiring. Predictions are `center + scale * raw`, where
/// the constants come from the training labels so the network regresses a
/// unit-scale target.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub output_center: f64,
    pub output_scale: f64,
    main: Sequential,
    main_embed: Affine,
    main_bn: BatchNorm,
    n3: Affine,
    n3_bn: BatchNorm,
    n4: Affine,
    n4_bn: BatchNorm,
    holding: Option<HoldingBranch>,
    head: Affine,
}

/// A batch in network layout. Images are `[n, 3, s, s]`.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub tabular: Tensor<T>,
    pub holding: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Node handles from one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub output: NodeId,
    pub image: NodeId,
    pub tabular: NodeId,
    pub holding: NodeId,
}

/// Planar "ink" encoding of an RGB raster: each channel is `1 - v / 255`,
/// so the white background is zero and only strokes excite the network.
pub fn encode_image<T: Scalar>(pixels: &[u8], size: usize, out: &mut Vec<T>) {
    assert_eq!(pixels.len(), 3 * size * size, "image buffer does not match size");
    let plane = size * size;
    for c in 0..3 {
        out.extend((0..plane).map(|i| T::lit(1.0 - pixels[3 * i + c] as f64 / 255.0)));
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let h = config.heads.clone();
        let mut store = ParamStore::new(config.init_seed);
        let main = config.main.build(&mut store, "main");
        let main_embed = Affine::new(&mut store, "main.embed", config.main.head_channels, h.main_embed);
        let main_bn = BatchNorm::new(&mut store, "main.embed_bn", h.main_embed);
        let n3 = Affine::new(&mut store, "mlp_n3", h.n3_in, h.n3_out);
        let n3_bn = BatchNorm::new(&mut store, "mlp_n3.bn", h.n3_out);
        let n4 = Affine::new(&mut store, "mlp_n4", h.n4_in, h.n4_out);
        let n4_bn = BatchNorm::new(&mut store, "mlp_n4.bn", h.n4_out);
        let holding = (!config.ablate_holding).then(|| {
            let backbone = config.holding.build(&mut store, "hold");
            HoldingBranch {
                backbone,
                embed: Affine::new(&mut store, "hold.embed", config.holding.head_channels, h.holding_embed),
                n1: Affine::new(&mut store, "mlp_n1", h.n1_in, h.n1_out),
                n2a: Affine::new(&mut store, "mlp_n2.a", h.n2_in, h.n2_hidden),
                n2_bn: BatchNorm::new(&mut store, "mlp_n2.bn", h.n2_hidden),
                n2b: Affine::new(&mut store, "mlp_n2.b", h.n2_hidden, h.n2_out),
            }
        });
        let head = Affine::new(&mut store, "head", h.final_in, 1);
        Ok(Self {
            config,
            store,
            output_center: 0.0,
            output_scale: 1.0,
            main,
            main_embed,
            main_bn,
            n3,
            n3_bn,
            n4,
            n4_bn,
            holding,
            head,
        })
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Builds the forward graph for `batch`; `output` is `[n, 1]` seconds.
    pub fn forward(&self, g: &mut Graph<T>, batch: &Batch<T>) -> Forward {
        let s = &self.store;
        let dropout = self.config.heads.dropout;
        let image = g.constant(batch.images.clone());
        let tabular = g.constant(batch.tabular.clone());
        let holding_in = g.constant(batch.holding.clone());

        let x = self.main.forward(s, g, image);
        let x = g.global_avg_pool(x);
        let x = self.main_embed.forward(s, g, x);
        let x = self.main_bn.forward(s, g, x);
        let main_vec = g.act(x, Activation::LeakyRelu);

        let t = self.n3.forward(s, g, tabular);
        let t = self.n3_bn.forward(s, g, t);
        let tab_vec = g.act(t, Activation::LeakyRelu);

        let fused = g.concat(&[main_vec, tab_vec]);
        let f = self.n4.forward(s, g, fused);
        let f = self.n4_bn.forward(s, g, f);
        let mut f = g.act(f, Activation::LeakyRelu);

        if let Some(hb) = &self.holding {
            let e = hb.backbone.forward(s, g, image);
            let e = g.global_avg_pool(e);
            let e = hb.embed.forward(s, g, e);
            let v = hb.n1.forward(s, g, holding_in);
            let v = g.act(v, Activation::LeakyRelu);
            let c = g.concat(&[e, v]);
            let c = hb.n2a.forward(s, g, c);
            let c = hb.n2_bn.forward(s, g, c);
            let c = g.act(c, Activation::LeakyRelu);
            let c = hb.n2b.forward(s, g, c);
            let c = g.dropout(c, dropout);
            let hold_vec = g.act(c, Activation::Sigmoid);
            f = g.concat(&[f, hold_vec]);
        }
        let raw = self.head.forward(s, g, f);
        let output = g.scale_shift(raw, T::lit(self.output_scale), T::lit(self.output_center));
        Forward { output, image, tabular, holding: holding_in }
    }

    /// Element-type conversion of the whole model.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            output_center: self.output_center,
            output_scale: self.output_scale,
            main: self.main.clone(),
            main_embed: self.main_embed.clone(),
            main_bn: self.main_bn.clone(),
            n3: self.n3.clone(),
            n3_bn: self.n3_bn.clone(),
            n4: self.n4.clone(),
            n4_bn: self.n4_bn.clone(),
            holding: self.holding.clone(),
            head: self.head.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use altnn::Mode;

    fn batch(n: usize, size: usize) -> Batch<f64> {
        let px = 3 * size * size;
        Batch {
            images: Tensor::from_vec(&[n, 3, size, size], (0..n * px).map(|i| ((i * 7) % 13) as f64 / 13.0).collect()),
            tabular: Tensor::from_vec(&[n, TABULAR_DIM], (0..n * TABULAR_DIM).map(|i| (i as f64).sin()).collect()),
            holding: Tensor::from_vec(&[n, HOLDING_DIM], (0..n * HOLDING_DIM).map(|i| (i as f64).cos()).collect()),
        }
    }

    #[test]
    fn desk_forward_shape() {
        for ablate in [false, true] {
            let cfg = if ablate { ModelConfig::desk().ablated() } else { ModelConfig::desk() };
            let m = Model::<f64>::new(cfg).unwrap();
            let mut g = Graph::new(Mode::Train, 1);
            let out = m.forward(&mut g, &batch(2, 64)).output;
            assert_eq!(g.shape(out), &[2, 1]);
            assert!(g.value(out).all_finite());
        }
    }

    #[test]
    fn width_mismatch_names_edge() {
        let mut cfg = ModelConfig::desk();
        cfg.heads.n2_in = 40;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("mlp_n2"), "{err}");
        let mut cfg = ModelConfig::desk();
        cfg.ablate_holding = true;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("final"), "{err}");
        assert!(ModelConfig::desk().ablated().validate().is_ok());
    }

    #[test]
    fn ink_encoding() {
        let mut v: Vec<f64> = Vec::new();
        encode_image(&[255, 255, 255, 255, 0, 0, 0, 0, 255, 255, 255, 255], 2, &mut v);
        assert_eq!(v, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }
}
