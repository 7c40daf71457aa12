use altnn::{
    compound_scale, depthwise_separable, flops, Activation, Adam, AdamConfig, Graph64, InvertedResidual, LayerKind,
    LayerSpec, Mode, ParamStore64, ScalingCoefficients, StageSpec, Tensor64,
};
use proptest::prelude::*;

#[test]
fn separable_identity_composition() {
    let mut g = Graph64::new(Mode::Eval, 0);
    let data: Vec<f64> = (0..2 * 4 * 4).map(|i| i as f64 * 0.5 - 3.0).collect();
    let x = g.input(Tensor64::from_vec(&[1, 2, 4, 4], data.clone()));
    let mut delta = vec![0.0; 2 * 9];
    delta[4] = 1.0;
    delta[9 + 4] = 1.0;
    let dw = g.input(Tensor64::from_vec(&[2, 3, 3], delta));
    let pw = g.input(Tensor64::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
    let y = depthwise_separable(&mut g, x, dw, pw, 1);
    assert_eq!(g.value(y).data(), &data[..]);
}

#[test]
fn separable_equals_sequential_primitives() {
    let mut g = Graph64::new(Mode::Eval, 0);
    let x = g.input(Tensor64::from_vec(&[2, 3, 5, 5], (0..150).map(|i| ((i * 37) % 17) as f64 - 8.0).collect()));
    let dw = g.input(Tensor64::from_vec(&[3, 3, 3], (0..27).map(|i| ((i * 5) % 7) as f64 - 3.0).collect()));
    let pw = g.input(Tensor64::from_vec(&[4, 3], (0..12).map(|i| i as f64 - 6.0).collect()));
    let a = depthwise_separable(&mut g, x, dw, pw, 2);
    let h = g.depthwise(x, dw, 2, 1);
    let b = g.pointwise(h, pw);
    assert_eq!(g.value(a).data(), g.value(b).data());
}

#[test]
fn residual_edge_only_for_shape_preserving_blocks() {
    for (stride, i, o, expect) in [(1, 4, 4, 1), (2, 4, 4, 0), (1, 4, 8, 0), (2, 4, 8, 0)] {
        let mut store = ParamStore64::new(1);
        let b = InvertedResidual::new(&mut store, "b", i, o, 6, 3, stride, true, Activation::Relu6);
        assert_eq!(b.residual, expect == 1);
        assert_eq!(LayerSpec::inverted_residual(3, stride, i, o, 6).has_residual(), expect == 1);
        let mut g = Graph64::new(Mode::Train, 0);
        let x = g.input(Tensor64::full(&[1, i, 4, 4], 0.3));
        b.forward(&store, &mut g, x);
        assert_eq!(g.count_op("add"), expect, "stride {stride} {i}->{o}");
    }
}

#[test]
fn zero_branch_is_pure_skip() {
    let mut store = ParamStore64::new(2);
    let b = InvertedResidual::new(&mut store, "b", 3, 3, 6, 3, 1, false, Activation::Relu6);
    for id in store.trainable_ids() {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let data: Vec<f64> = (0..3 * 16).map(|i| (i as f64).sin()).collect();
    let mut g = Graph64::new(Mode::Eval, 0);
    let x = g.input(Tensor64::from_vec(&[1, 3, 4, 4], data.clone()));
    let y = b.forward(&store, &mut g, x);
    assert_eq!(g.value(y).data(), &data[..]);
}

#[test]
fn invres_param_count_matches_formula() {
    let mut store = ParamStore64::new(3);
    let b = InvertedResidual::new(&mut store, "b", 8, 16, 6, 3, 2, true, Activation::Relu6);
    let spec = LayerSpec::inverted_residual(3, 2, 8, 16, 6);
    assert_eq!(b.param_count(), altnn::param_count(&spec));
    assert_eq!(store.trainable_count(), b.param_count());
}

#[test]
fn flops_ratio_limit_is_k_squared() {
    let std = LayerSpec::conv(LayerKind::Conv, 3, 32, 10_000);
    let sep = LayerSpec::conv(LayerKind::Separable, 3, 32, 10_000);
    let ratio = flops(&std, 8, 8).unwrap() as f64 / flops(&sep, 8, 8).unwrap() as f64;
    assert!((ratio - 9.0).abs() / 9.0 < 0.01, "{ratio}");
}

proptest! {
    #[test]
    fn flops_ratio_closed_form(k in 1usize..8, dj in 1usize..512, di in 1usize..64, h in 1usize..32) {
        let std = LayerSpec::conv(LayerKind::Conv, k, di, dj);
        let sep = LayerSpec::conv(LayerKind::Separable, k, di, dj);
        let a = flops(&std, h, h).unwrap();
        let b = flops(&sep, h, h).unwrap();
        // a / b == dj k^2 / (k^2 + dj), compared without division
        prop_assert_eq!(a as u128 * (k * k + dj) as u128, b as u128 * (dj * k * k) as u128);
    }
}

#[test]
fn compound_scaling_constraint() {
    let c = ScalingCoefficients::default();
    assert!((c.constraint_product() - 1.920).abs() < 1e-3);
    assert!(c.satisfies_constraint());
    let (d, w, r) = c.multipliers();
    assert_eq!((d, w, r), (1.2, 1.1, 1.15));
    let base = vec![StageSpec { repeats: 3, channels: 40 }];
    let same = compound_scale(&ScalingCoefficients { phi: 0.0, ..c }, &base, 64);
    assert_eq!(same.stages, base);
    assert_eq!(same.resolution, 64);
}

#[test]
fn adam_runs_are_reproducible() {
    let run = || {
        let mut store = ParamStore64::new(42);
        let b = InvertedResidual::new(&mut store, "b", 2, 2, 2, 3, 1, true, Activation::Relu6);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        for step in 0..3 {
            let mut g = Graph64::new(Mode::Train, step);
            let x = g.input(Tensor64::from_vec(&[2, 2, 3, 3], (0..36).map(|i| (i as f64 * 0.3).cos()).collect()));
            let y = b.forward(&store, &mut g, x);
            let p = g.global_avg_pool(y);
            let l = g.l1_loss(p, &[1.0, -1.0, 0.5, 0.0]);
            g.backward(l);
            let grads = altnn::collect_grads(&store, &g);
            store.update_running_stats(&g, 0.1);
            opt.step(&mut store, &grads);
        }
        store.entries().iter().flat_map(|e| e.value.data().to_vec()).collect::<Vec<f64>>()
    };
    assert_eq!(run(), run());
}
