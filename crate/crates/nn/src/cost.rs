//! Multiply-accumulate and parameter accounting for convolution layers.

use serde::{Deserialize, Serialize};

use crate::error::NnError;
use crate::graph::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    DwConv,
    PwConv,
    /// Depthwise k x k followed by pointwise mixing.
    Separable,
    InvRes,
    BatchNorm,
    Affine,
    Act,
    Dropout,
    Pool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub k: usize,
    pub stride: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub expansion: usize,
    pub act: Activation,
    pub drop: f64,
}

impl LayerSpec {
    pub fn conv(kind: LayerKind, k: usize, in_ch: usize, out_ch: usize) -> Self {
        Self {
            kind,
            k,
            stride: 1,
            in_ch,
            out_ch,
            expansion: 1,
            act: Activation::Identity,
            drop: 0.0,
        }
    }

    pub fn inverted_residual(k: usize, stride: usize, in_ch: usize, out_ch: usize, expansion: usize) -> Self {
        Self { kind: LayerKind::InvRes, stride, expansion, ..Self::conv(LayerKind::InvRes, k, in_ch, out_ch) }
    }

    /// Inverted residual blocks keep a skip path only for shape-preserving blocks.
    pub fn has_residual(&self) -> bool {
        self.kind == LayerKind::InvRes && self.stride == 1 && self.in_ch == self.out_ch
    }
}

fn out_len(len: u64, stride: usize) -> u64 {
    len.div_ceil(stride as u64)
}

/// Multiply-accumulate count of a convolution-family layer on an `h x w`
/// input. Standard: `h w d_i d_j k^2`; separable: `h w d_i (k^2 + d_j)`.
pub fn flops(spec: &LayerSpec, h: usize, w: usize) -> Result<u64, NnError> {
    let k2 = (spec.k * spec.k) as u64;
    let di = spec.in_ch as u64;
    let dj = spec.out_ch as u64;
    let (oh, ow) = (out_len(h as u64, spec.stride), out_len(w as u64, spec.stride));
    let hw = oh * ow;
    Ok(match spec.kind {
        LayerKind::Conv => hw * di * dj * k2,
        LayerKind::DwConv => hw * di * k2,
        LayerKind::PwConv => hw * di * dj,
        LayerKind::Separable => hw * di * (k2 + dj),
        LayerKind::InvRes => {
            let hidden = di * spec.expansion as u64;
            let expand = if spec.expansion == 1 { 0 } else { (h * w) as u64 * di * hidden };
            expand + hw * hidden * k2 + hw * hidden * dj
        }
        other => return Err(NnError::NotConv(format!("{other:?}"))),
    })
}

/// Trainable parameters of a layer (batch norm counts scale and shift).
pub fn param_count(spec: &LayerSpec) -> usize {
    let k2 = spec.k * spec.k;
    match spec.kind {
        LayerKind::Conv => k2 * spec.in_ch * spec.out_ch,
        LayerKind::DwConv => k2 * spec.in_ch,
        LayerKind::PwConv => spec.in_ch * spec.out_ch,
        LayerKind::Separable => k2 * spec.in_ch + spec.in_ch * spec.out_ch,
        LayerKind::InvRes => {
            let hidden = spec.in_ch * spec.expansion;
            let expand = if spec.expansion == 1 { 0 } else { spec.in_ch * hidden + 2 * hidden };
            expand + k2 * hidden + 2 * hidden + hidden * spec.out_ch + 2 * spec.out_ch
        }
        LayerKind::BatchNorm => 2 * spec.in_ch,
        LayerKind::Affine => spec.in_ch * spec.out_ch + spec.out_ch,
        LayerKind::Act | LayerKind::Dropout | LayerKind::Pool => 0,
    }
}
