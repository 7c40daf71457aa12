//! Mini-batch training with Adam on the L1 loss, best-validation snapshot,
//! CSV history and JSON checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use altnn::{collect_grads, Adam, AdamConfig, Graph, Mode, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ArrivalSample, HOLDING_DIM, TABULAR_DIM};
use crate::error::{CoreError, Result};
use crate::model::{encode_image, Batch, Model};
use crate::raster::decode_png;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 50, batch_size: 64, adam: AdamConfig::default(), seed: 0, bn_momentum: 0.1 }
    }
}

/// Samples in network layout, already normalized.
#[derive(Debug, Clone)]
pub struct TensorSet<T> {
    pub size: usize,
    pub ids: Vec<String>,
    pub images: Vec<T>,
    pub tabular: Vec<T>,
    pub holding: Vec<T>,
    pub labels: Vec<f64>,
}

impl<T: Scalar> TensorSet<T> {
    /// Pairs each sample with its RGB pixel buffer (`3 * size * size` bytes).
    pub fn from_pixels<'a>(
        samples: &[ArrivalSample],
        pixels: impl IntoIterator<Item = &'a [u8]>,
        size: usize,
    ) -> Result<Self> {
        let mut set = Self {
            size,
            ids: Vec::with_capacity(samples.len()),
            images: Vec::with_capacity(samples.len() * 3 * size * size),
            tabular: Vec::with_capacity(samples.len() * TABULAR_DIM),
            holding: Vec::with_capacity(samples.len() * HOLDING_DIM),
            labels: Vec::with_capacity(samples.len()),
        };
        let mut pixels = pixels.into_iter();
        for s in samples {
            let px = pixels
                .next()
                .ok_or_else(|| CoreError::Data("fewer images than samples".into()))?;
            if px.len() != 3 * size * size {
                return Err(CoreError::Data(format!(
                    "image for {} has {} bytes, expected {}",
                    s.aircraft_id,
                    px.len(),
                    3 * size * size
                )));
            }
            set.push(s, px);
        }
        Ok(set)
    }

    /// Loads each sample's PNG relative to `root`.
    pub fn load(samples: &[ArrivalSample], root: &Path, size: usize) -> Result<Self> {
        let mut set = Self::from_pixels(&[], std::iter::empty(), size)?;
        for s in samples {
            let path = root.join(&s.image);
            let (w, h, px) = decode_png(&path)?;
            if w as usize != size || h as usize != size {
                return Err(CoreError::Data(format!("{} is {w}x{h}, expected {size}x{size}", path.display())));
            }
            set.push(s, &px);
        }
        Ok(set)
    }

    fn push(&mut self, s: &ArrivalSample, px: &[u8]) {
        self.ids.push(s.aircraft_id.clone());
        encode_image(px, self.size, &mut self.images);
        self.tabular.extend(s.tabular.iter().map(|&v| T::lit(v)));
        self.holding.extend(s.holding.iter().map(|&v| T::lit(v)));
        self.labels.push(s.label_seconds);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Batch<T> {
        let plane = 3 * self.size * self.size;
        let gather = |src: &[T], width: usize| -> Vec<T> {
            idx.iter().flat_map(|&i| src[i * width..(i + 1) * width].iter().copied()).collect()
        };
        Batch {
            images: Tensor::from_vec(&[idx.len(), 3, self.size, self.size], gather(&self.images, plane)),
            tabular: Tensor::from_vec(&[idx.len(), TABULAR_DIM], gather(&self.tabular, TABULAR_DIM)),
            holding: Tensor::from_vec(&[idx.len(), HOLDING_DIM], gather(&self.holding, HOLDING_DIM)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Weights from the epoch with the lowest validation MAE.
    pub best: Model<T>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub history: Vec<EpochStats>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Centers the output on the mean training label and scales by the
/// population standard deviation (1 when the labels are constant).
pub fn fit_output_scaling<T: Scalar>(model: &mut Model<T>, labels: &[f64]) {
    let m = mean(labels);
    let var = labels.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / labels.len() as f64;
    model.output_center = m;
    model.output_scale = if var > 0.0 { var.sqrt() } else { 1.0 };
}

/// Eval-mode predictions in input order.
pub fn predict<T: Scalar>(model: &Model<T>, data: &TensorSet<T>, batch_size: usize) -> Vec<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let mut g = Graph::new(Mode::Eval, 0);
        let f = model.forward(&mut g, &data.batch(chunk));
        out.extend(g.value(f.output).data().iter().map(|v| v.as_f64()));
    }
    out
}

pub fn mae(pred: &[f64], labels: &[f64]) -> f64 {
    pred.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / labels.len() as f64
}

/// Trains in place and returns the best-validation snapshot. Batches are
/// drawn from a per-epoch shuffle seeded by `cfg.seed`. A trailing batch of
/// one sample is dropped, since batch statistics over one row are degenerate,
/// unless the whole training set is that one sample.
pub fn train<T: Scalar>(model: &mut Model<T>, train: &TensorSet<T>, val: &TensorSet<T>, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    if train.is_empty() || val.is_empty() {
        return Err(CoreError::Data("training and validation sets must be non-empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(CoreError::Config("batch_size must be positive".into()));
    }
    let mut opt = Adam::new(cfg.adam, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (model.clone(), 0, f64::INFINITY);
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut abs_sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2 || train.len() == 1) {
            step += 1;
            let mut g = Graph::new(Mode::Train, cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(step));
            let f = model.forward(&mut g, &train.batch(chunk));
            let target: Vec<T> = chunk.iter().map(|&i| T::lit(train.labels[i])).collect();
            let loss = g.l1_loss(f.output, &target);
            let lv = g.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(CoreError::Diverged { epoch, loss: lv });
            }
            abs_sum += lv * chunk.len() as f64;
            seen += chunk.len();
            g.backward(loss);
            let grads = collect_grads(&model.store, &g);
            model.store.update_running_stats(&g, cfg.bn_momentum);
            opt.step(&mut model.store, &grads);
        }
        let val_pred = predict(model, val, cfg.batch_size);
        let val_mae = mae(&val_pred, &val.labels);
        if !val_mae.is_finite() {
            return Err(CoreError::Diverged { epoch, loss: val_mae });
        }
        let train_mae = if seen > 0 { abs_sum / seen as f64 } else { f64::NAN };
        log::debug!("epoch {epoch}: train_mae {train_mae:.3} val_mae {val_mae:.3}");
        history.push(EpochStats { epoch, train_mae, val_mae });
        if val_mae < best.2 {
            best = (model.clone(), epoch, val_mae);
        }
    }
    let (best, best_epoch, best_val_mae) = best;
    Ok(TrainOutcome { best, best_epoch, best_val_mae, history })
}

pub fn write_history<W: Write>(w: W, history: &[EpochStats]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for row in history {
        wr.serialize(row)?;
    }
    wr.flush().map_err(|e| CoreError::io("history", e))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Checkpoint<T> {
    pub version: u32,
    pub train: TrainConfig,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub model: Model<T>,
}

pub fn save_checkpoint<T: Scalar + Serialize>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let f = File::create(path).map_err(|e| CoreError::io(path, e))?;
    serde_json::to_writer(BufWriter::new(f), ckpt)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar + for<'de> Deserialize<'de>>(path: &Path) -> Result<Checkpoint<T>> {
    let f = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let ckpt: Checkpoint<T> = serde_json::from_reader(BufReader::new(f))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(CoreError::Schema(format!(
            "checkpoint version {} (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    ckpt.model.config.validate()?;
    Ok(ckpt)
}
