//! Central-difference checks for every differentiable op and block.

use altnn::gradcheck::{max_relative_error, numeric_grads, DEFAULT_EPS};
use altnn::{
    depthwise_separable, Activation, Graph64, InvertedResidual, Mode, NodeId, ParamStore64, Tensor64,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    let n = shape.iter().product();
    Tensor64::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Builds `sum(probe * f(inputs))` and compares graph gradients of every
/// input against central differences.
fn check<F>(inputs: Vec<Tensor64>, mode: Mode, build: F) -> f64
where
    F: Fn(&mut Graph64, &[NodeId]) -> NodeId,
{
    let run = |ts: &[Tensor64], want_grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph64::new(mode, 7);
        let ids: Vec<NodeId> = ts.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &ids);
        let mut prng = ChaCha8Rng::seed_from_u64(99);
        let probe: Vec<f64> = (0..g.value(out).len()).map(|_| prng.gen_range(-1.0..1.0)).collect();
        let loss = g.weighted_sum(out, &probe);
        let v = g.value(loss).data()[0];
        if !want_grads {
            return (v, vec![]);
        }
        g.backward(loss);
        let grads = ids
            .iter()
            .map(|&i| g.grad(i).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(i).len()]))
            .collect();
        (v, grads)
    };
    let (_, analytic) = run(&inputs, true);
    let numeric = numeric_grads(&inputs, DEFAULT_EPS, |ts| run(ts, false).0);
    max_relative_error(&analytic, &numeric)
}

#[test]
fn conv2d_stride1_and_stride2() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for stride in [1, 2] {
        let x = random(&mut rng, &[2, 2, 6, 6]);
        let w = random(&mut rng, &[3, 2, 3, 3]);
        let err = check(vec![x, w], Mode::Train, |g, ids| g.conv2d(ids[0], ids[1], stride, 1));
        assert!(err < TOL, "stride {stride}: {err}");
    }
}

#[test]
fn depthwise_and_pointwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (k, stride) in [(3, 1), (3, 2), (5, 1), (5, 2)] {
        let x = random(&mut rng, &[2, 3, 7, 6]);
        let w = random(&mut rng, &[3, k, k]);
        let err = check(vec![x, w], Mode::Train, |g, ids| g.depthwise(ids[0], ids[1], stride, k / 2));
        assert!(err < TOL, "k {k} stride {stride}: {err}");
    }
    let x = random(&mut rng, &[2, 3, 4, 5]);
    let w = random(&mut rng, &[4, 3]);
    let err = check(vec![x, w], Mode::Train, |g, ids| g.pointwise(ids[0], ids[1]));
    assert!(err < TOL, "pointwise: {err}");
}

#[test]
fn depthwise_separable_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[1, 2, 6, 6]);
    let dw = random(&mut rng, &[2, 3, 3]);
    let pw = random(&mut rng, &[3, 2]);
    let err = check(vec![x, dw, pw], Mode::Train, |g, ids| depthwise_separable(g, ids[0], ids[1], ids[2], 1));
    assert!(err < TOL, "{err}");
}

#[test]
fn activations_pool_bias_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for act in [
        Activation::Relu,
        Activation::Relu6,
        Activation::LeakyRelu,
        Activation::Sigmoid,
        Activation::Silu,
    ] {
        // scale so relu6 sees both saturation edges
        let x = random(&mut rng, &[2, 3, 3, 3]).map(|v| v * 8.0);
        let err = check(vec![x], Mode::Train, |g, ids| g.act(ids[0], act));
        assert!(err < TOL, "{act:?}: {err}");
    }
    let x = random(&mut rng, &[2, 3, 4, 4]);
    let b = random(&mut rng, &[3]);
    let err = check(vec![x, b], Mode::Train, |g, ids| {
        let y = g.add_bias(ids[0], ids[1]);
        g.global_avg_pool(y)
    });
    assert!(err < TOL, "pool/bias: {err}");
    let a = random(&mut rng, &[3, 2]);
    let c = random(&mut rng, &[3, 4]);
    let err = check(vec![a, c], Mode::Train, |g, ids| g.concat(&[ids[0], ids[1]]));
    assert!(err < TOL, "concat: {err}");
}

#[test]
fn affine_batchnorm_dropout_l1() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[5, 4]);
    let w = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[3]);
    let gamma = random(&mut rng, &[3]);
    let beta = random(&mut rng, &[3]);
    for mode in [Mode::Train, Mode::Eval] {
        let err = check(
            vec![x.clone(), w.clone(), b.clone(), gamma.clone(), beta.clone()],
            mode,
            |g, ids| {
                let y = g.matmul(ids[0], ids[1]);
                let y = g.add_bias(y, ids[2]);
                let y = g.batch_norm(y, ids[3], ids[4], (&[0.1, -0.2, 0.3], &[1.5, 0.7, 2.0]), 0);
                g.dropout(y, 0.3)
            },
        );
        assert!(err < TOL, "{mode:?}: {err}");
    }
    let x = random(&mut rng, &[2, 3, 3, 3]);
    let gamma = random(&mut rng, &[3]);
    let beta = random(&mut rng, &[3]);
    let err = check(vec![x, gamma, beta], Mode::Train, |g, ids| {
        g.batch_norm(ids[0], ids[1], ids[2], (&[0.0; 3], &[1.0; 3]), 0)
    });
    assert!(err < TOL, "bn2d: {err}");
    let p = random(&mut rng, &[4, 1]);
    let err = check(vec![p], Mode::Train, |g, ids| {
        let l = g.l1_loss(ids[0], &[0.5, -0.5, 0.25, 2.0]);
        g.scale_shift(l, 3.0, 1.0)
    });
    assert!(err < TOL, "l1: {err}");
}

/// Checks parameter gradients of a whole inverted residual block by
/// perturbing the store directly.
fn block_check(stride: usize, in_ch: usize, out_ch: usize, norm: bool) -> f64 {
    let mut store = ParamStore64::new(11);
    let block = InvertedResidual::new(&mut store, "b", in_ch, out_ch, 6, 3, stride, norm, Activation::Relu6);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ids = store.trainable_ids();
    // zero-initialised biases can park pre-activations exactly on a kink
    for &id in &ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let x = random(&mut rng, &[2, in_ch, 5, 5]);
    let probe_len = 2 * out_ch * 5usize.div_ceil(stride).pow(2);
    let probe: Vec<f64> = (0..probe_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let eval = |store: &ParamStore64, x: &Tensor64, grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph64::new(Mode::Train, 0);
        let xi = g.input(x.clone());
        let y = block.forward(store, &mut g, xi);
        let l = g.weighted_sum(y, &probe);
        let v = g.value(l).data()[0];
        if !grads {
            return (v, vec![]);
        }
        g.backward(l);
        let pg = altnn::collect_grads(store, &g);
        let mut out = vec![g.grad(xi).unwrap().to_vec()];
        out.extend(ids.iter().map(|id| pg[id.0].clone().unwrap()));
        (v, out)
    };
    let (_, analytic) = eval(&store, &x, true);
    let mut inputs = vec![x.clone()];
    inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
    let numeric = numeric_grads(&inputs, DEFAULT_EPS, |ts| {
        let mut s = store.clone();
        for (id, t) in ids.iter().zip(&ts[1..]) {
            *s.get_mut(*id) = t.clone();
        }
        eval(&s, &ts[0], false).0
    });
    max_relative_error(&analytic, &numeric)
}

#[test]
fn inverted_residual_blocks() {
    for (stride, i, o, norm) in [(1, 2, 2, true), (2, 2, 3, true), (1, 2, 3, false), (1, 3, 3, false)] {
        let err = block_check(stride, i, o, norm);
        assert!(err < TOL, "stride {stride} {i}->{o} norm {norm}: {err}");
    }
}
