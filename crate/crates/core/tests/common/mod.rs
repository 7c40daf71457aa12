//! Helpers shared by the model and acceptance test targets.
#![allow(dead_code)]

use alt_core::dataset::{HOLDING_DIM, TABULAR_DIM};
use alt_core::model::{BackboneConfig, Batch, HeadConfig, ModelConfig, Stage};
use alt_core::Model64;
use altnn::gradcheck::{numeric_grads, relative_error, DEFAULT_EPS};
use altnn::{collect_grads, Activation, Graph64, Mode, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        main: BackboneConfig {
            stem_channels: 4,
            stages: vec![Stage::new(1, 4, 1, 2, 3), Stage::new(2, 4, 2, 1, 3)],
            head_channels: 6,
            act: Activation::Relu6,
            norm: true,
        },
        holding: BackboneConfig {
            stem_channels: 3,
            stages: vec![Stage::new(2, 5, 1, 2, 5)],
            head_channels: 4,
            act: Activation::Silu,
            norm: true,
        },
        heads: HeadConfig {
            main_embed: 6,
            holding_embed: 5,
            n1_in: HOLDING_DIM,
            n1_out: 3,
            n2_in: 8,
            n2_hidden: 4,
            n2_out: 2,
            n3_in: TABULAR_DIM,
            n3_out: 4,
            n4_in: 10,
            n4_out: 5,
            final_in: 7,
            dropout: 0.1,
        },
        ablate_holding: false,
        init_seed: 3,
    }
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Batch<f64> {
    let mut t = |shape: &[usize]| {
        let len = shape.iter().product();
        Tensor64::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    Batch { images: t(&[n, 3, size, size]), tabular: t(&[n, TABULAR_DIM]), holding: t(&[n, HOLDING_DIM]) }
}

/// Max relative error between backprop and central differences over every
/// trainable parameter of `model`, for a random linear probe of the output.
///
/// ReLU6 and LeakyReLU have kinks; when a perturbation happens to straddle
/// one the central difference is meaningless for that element. Each element
/// is therefore scored at two step sizes and keeps the better result, which
/// still fails for a wrong derivative (both steps disagree) while a kink is
/// practically never inside both intervals.
pub fn model_gradient_error(model: &Model64, batch: &Batch<f64>) -> f64 {
    let ids = model.store.trainable_ids();
    let probe: Vec<f64> = {
        let mut r = ChaCha8Rng::seed_from_u64(17);
        (0..batch.len()).map(|_| r.gen_range(-1.0..1.0)).collect()
    };
    let eval = |m: &Model64, backward: bool| {
        let mut g = Graph64::new(Mode::Train, 11);
        let f = m.forward(&mut g, batch);
        let loss = g.weighted_sum(f.output, &probe);
        let v = g.value(loss).data()[0];
        let grads = if backward {
            g.backward(loss);
            collect_grads(&m.store, &g)
        } else {
            Vec::new()
        };
        (v, grads)
    };
    let (_, grads) = eval(model, true);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| grads[id.0].clone().unwrap_or_else(|| vec![0.0; model.store.get(id).len()]))
        .collect();
    let params: Vec<Tensor64> = ids.iter().map(|&id| model.store.get(id).clone()).collect();
    let mut work = model.clone();
    let mut numeric_at = |eps: f64| {
        numeric_grads(&params, eps, |ts| {
            for (&id, t) in ids.iter().zip(ts) {
                *work.store.get_mut(id) = t.clone();
            }
            eval(&work, false).0
        })
    };
    let coarse = numeric_at(DEFAULT_EPS);
    let fine = numeric_at(DEFAULT_EPS / 4.0);
    let mut worst = 0.0f64;
    for ((a, c), f) in analytic.iter().zip(&coarse).zip(&fine) {
        for ((&a, &c), &f) in a.iter().zip(c).zip(f) {
            worst = worst.max(relative_error(a, c).min(relative_error(a, f)));
        }
    }
    worst
}
