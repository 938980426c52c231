use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Central-difference check of `Σ r·f(inputs)` with respect to every input.
fn check_op(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let store = ParamStore::new();
    let eval = |xs: &[Tensor]| -> (f64, Vec<Vec<f64>>, Tensor) {
        let mut g = Graph::new(&store, true, 0);
        let vs: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let y = f(&mut g, &vs);
        let yv = g.value(y).clone();
        let weights: Vec<f64> = (0..yv.len()).map(|i| 0.3 + (i as f64 * 0.77).sin()).collect();
        let r = Tensor::new(yv.shape().to_vec(), weights).unwrap();
        let l = g.dot_const(y, &r).unwrap();
        let grads = g.backward_all(l);
        (g.value(l).item(), vs.iter().map(|&v| grads.get(v)).collect(), yv)
    };
    let (_, analytic, _) = eval(&inputs);
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let mut xp = inputs.clone();
            xp[k].data_mut()[i] += eps;
            let mut xm = inputs.clone();
            xm[k].data_mut()[i] -= eps;
            let num = (eval(&xp).0 - eval(&xm).0) / (2.0 * eps);
            let a = analytic[k][i];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-5));
        }
    }
    worst
}

#[test]
fn conv_identity_and_hand_example() {
    let x = Tensor::new(vec![1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false, 0);
    let xv = g.constant(x.clone());
    let id = g.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
    let y = g.conv1d(xv, id, None, 0, 1).unwrap();
    assert_eq!(g.value(y).data(), x.data());
    let k = g.constant(Tensor::new(vec![3, 1, 1], vec![1.0, 0.0, -1.0]).unwrap());
    let y = g.conv1d(xv, k, None, 1, 1).unwrap();
    assert_eq!(g.value(y).data(), &[-2.0, -2.0, 2.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let y = forward(&LayerSpec::Softmax, &Tensor::zeros(vec![4]), 0).unwrap();
    assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn shape_errors_report_both_shapes() {
    let err = forward(&LayerSpec::Fc { in_dim: 3, out_dim: 2 }, &Tensor::zeros(vec![2, 4]), 0).unwrap_err();
    match err {
        Error::Shape { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![2, 4]);
            assert_eq!(rhs, vec![3, 2]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn shape_algebra() {
    let spec = LayerSpec::Conv1d { in_channels: 3, out_channels: 6, kernel: 5, padding: 2, dilation: 1 };
    let y = forward(&spec, &Tensor::zeros(vec![2, 11, 3]), 1).unwrap();
    assert_eq!(y.shape(), &[2, 11, 6]);
    let y = forward(&LayerSpec::BiLstm { in_dim: 4, hidden: 5 }, &Tensor::zeros(vec![1, 7, 4]), 1).unwrap();
    assert_eq!(y.shape(), &[1, 7, 10]);
}

#[test]
fn layer_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cases: Vec<(LayerSpec, Vec<usize>, f64)> = vec![
        (LayerSpec::Fc { in_dim: 3, out_dim: 2 }, vec![4, 3], 1e-4),
        (LayerSpec::Conv1d { in_channels: 2, out_channels: 3, kernel: 3, padding: 2, dilation: 2 }, vec![2, 6, 2], 1e-4),
        (LayerSpec::BatchNorm { channels: 3 }, vec![2, 4, 3], 1e-3),
        (LayerSpec::Relu, vec![3, 4], 1e-3),
        (LayerSpec::Tanh, vec![3, 4], 1e-3),
        (LayerSpec::Softmax, vec![3, 5], 1e-3),
        (LayerSpec::Lstm { in_dim: 3, hidden: 8 }, vec![2, 1, 3], 1e-3),
        (LayerSpec::BiLstm { in_dim: 2, hidden: 3 }, vec![2, 4, 2], 1e-3),
    ];
    for (spec, shape, tol) in cases {
        let x = rand_tensor(&mut rng, &shape);
        let r = grad_check(&spec, &x, 1e-5, tol, 3).unwrap();
        assert!(r.passed, "{spec:?}: {r:?}");
    }
    let ids = Tensor::new(vec![2, 3], vec![0.0, 4.0, 2.0, 2.0, 1.0, 0.0]).unwrap();
    let r = grad_check(&LayerSpec::Embedding { vocab: 5, dim: 3 }, &ids, 1e-5, 1e-4, 1).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn grad_check_rejects_bad_step() {
    let x = Tensor::zeros(vec![1, 2]);
    assert!(grad_check(&LayerSpec::Tanh, &x, 0.1, 1e-3, 0).is_err());
    assert!(grad_check(&LayerSpec::Tanh, &x, 0.0, 1e-3, 0).is_err());
}

#[test]
fn composite_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tol = 1e-5;
    let a = rand_tensor(&mut rng, &[2, 3]);
    let m = rand_tensor(&mut rng, &[2, 3, 4]);
    assert!(check_op(vec![a.clone(), m.clone()], |g, v| {
        let s = g.softmax_last(v[0], None).unwrap();
        g.weighted_sum(s, v[1]).unwrap()
    }) < tol);
    let q = rand_tensor(&mut rng, &[2, 4]);
    assert!(check_op(vec![m.clone(), q.clone()], |g, v| {
        let s = g.add_rows(v[0], v[1]).unwrap();
        g.tanh(s)
    }) < tol);
    let mask = vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0];
    let mk = mask.clone();
    assert!(check_op(vec![m.clone()], move |g, v| g.mean_time(v[0], Some(&mk)).unwrap()) < tol);
    assert!(check_op(vec![m.clone(), q.clone()], |g, v| {
        let s = g.sigmoid(v[1]);
        g.scale_channels(v[0], s).unwrap()
    }) < tol);
    let e = rand_tensor(&mut rng, &[2, 3, 4]);
    let mk = mask.clone();
    assert!(check_op(vec![m.clone(), e], move |g, v| g.attentive_stats(v[0], v[1], Some(&mk)).unwrap()) < tol);
    let b = rand_tensor(&mut rng, &[2, 3]);
    assert!(check_op(vec![a.clone(), b.clone()], |g, v| {
        let c = g.concat_last(&[v[0], v[1]]).unwrap();
        let s = g.slice_last(c, 2, 3).unwrap();
        let p = g.mul(s, v[1]).unwrap();
        g.blend(p, v[0], &[0.0, 1.0]).unwrap()
    }) < tol);
    assert!(check_op(vec![a.clone(), b.clone()], |g, v| {
        let st = g.stack_time(&[v[0], v[1], v[0]]).unwrap();
        let t1 = g.select_time(st, 2).unwrap();
        g.sub(t1, v[1]).unwrap()
    }) < tol);
    let gates = rand_tensor(&mut rng, &[2, 8]);
    let c = rand_tensor(&mut rng, &[2, 2]);
    assert!(check_op(vec![gates, c], |g, v| g.lstm_cell(v[0], v[1]).unwrap()) < tol);
    let target = rand_tensor(&mut rng, &[2, 3]);
    assert!(check_op(vec![a.clone()], move |g, v| g.mse_masked(v[0], &target, Some(&[1.0, 0.0])).unwrap()) < tol);
    assert!(check_op(vec![a.clone()], |g, v| g
        .bce_logits(v[0], &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0], Some(&[1.0, 1.0, 0.0, 1.0, 1.0, 1.0]), 5.0)
        .unwrap()) < tol);
    assert!(check_op(vec![a.clone()], |g, v| g.cross_entropy(v[0], &[2, 0]).unwrap()) < tol);
    let big = rand_tensor(&mut rng, &[2, 3]);
    assert!(check_op(vec![big], |g, v| {
        let s = g.softmax_last(v[0], Some(&[1.0, 0.0, 1.0, 1.0, 1.0, 0.0])).unwrap();
        g.scale(s, 3.0)
    }) < tol);
    assert!(check_op(vec![a.clone(), b], |g, v| {
        let x = g.mul(v[0], v[1]).unwrap();
        let s = g.sum(x);
        let t = g.sum(v[0]);
        g.combine(&[(s, 0.5), (t, -2.0)]).unwrap()
    }) < tol);
}

#[test]
fn masked_batch_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&mut rng, &[5, 3]);
    let gamma = rand_tensor(&mut rng, &[3]);
    let beta = rand_tensor(&mut rng, &[3]);
    let mask = [1.0, 0.0, 1.0, 1.0, 1.0];
    assert!(check_op(vec![x, gamma, beta], move |g, v| g.batch_norm(v[0], v[1], v[2], Some(&mask), None, 0.1, 1e-5).unwrap()) < 1e-4);
}

#[test]
fn attentive_stats_identities() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false, 0);
    // Constant features: σ is exactly zero, μ is the constant.
    let h = g.constant(Tensor::full(vec![1, 6, 2], 0.7));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let e = g.constant(rand_tensor(&mut rng, &[1, 6, 2]));
    let p = g.attentive_stats(h, e, None).unwrap();
    let v = g.value(p).data();
    assert!((v[0] - 0.7).abs() < 1e-12 && (v[1] - 0.7).abs() < 1e-12);
    assert_eq!(&v[2..], &[0.0, 0.0]);
    // Uniform weights reduce to plain statistics.
    let data = rand_tensor(&mut rng, &[1, 5, 1]);
    let h = g.constant(data.clone());
    let e = g.constant(Tensor::zeros(vec![1, 5, 1]));
    let p = g.attentive_stats(h, e, None).unwrap();
    let mean = data.data().iter().sum::<f64>() / 5.0;
    let std = (data.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
    assert!((g.value(p).data()[0] - mean).abs() < 1e-12);
    assert!((g.value(p).data()[1] - std).abs() < 1e-12);
}

#[test]
fn batch_norm_running_statistics() {
    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", ParamGroup::Main, 2);
    let x = Tensor::new(vec![4, 2], vec![1.0, 0.0, 3.0, 0.0, 5.0, 2.0, 7.0, 2.0]).unwrap();
    let mut g = Graph::new(&store, true, 0);
    let xv = g.constant(x.clone());
    bn.forward(&mut g, xv, None).unwrap();
    let upd = g.take_buffer_updates();
    drop(g);
    for (id, t) in upd {
        *store.get_mut(id) = t;
    }
    // Batch mean (4, 1), unbiased variance (6.667, 1.333), momentum 0.1.
    let rm = store.get(bn.running_mean).data();
    assert!((rm[0] - 0.4).abs() < 1e-12 && (rm[1] - 0.1).abs() < 1e-12);
    let rv = store.get(bn.running_var).data();
    assert!((rv[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    // Eval mode is deterministic and uses the running statistics.
    let run = |store: &ParamStore| {
        let mut g = Graph::inference(store, 0);
        let xv = g.constant(x.clone());
        let y = bn.forward(&mut g, xv, None).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(&store), run(&store));
}

#[test]
fn adam_respects_frozen_groups_and_clipping() {
    let mut store = ParamStore::new();
    let a = store.add("a", ParamGroup::Main, Tensor::full(vec![2], 1.0));
    let b = store.add("b", ParamGroup::Paralinguistic, Tensor::full(vec![2], 1.0));
    let mut adam = Adam::new(&store, 0.0);
    let mut grads = ParamGrads { grads: vec![Some(vec![3.0, 4.0]), Some(vec![0.0, 0.0])] };
    let pre = clip_global_norm(&mut grads, 1.0);
    assert!((pre - 5.0).abs() < 1e-12);
    assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    grads.grads[1] = Some(vec![1.0, 1.0]);
    adam.step(&mut store, &grads, |g| if g == ParamGroup::Main { 1e-3 } else { 0.0 });
    assert_eq!(store.get(b).data(), &[1.0, 1.0]);
    assert!(store.get(a).data().iter().all(|&v| (v - (1.0 - 1e-3)).abs() < 1e-9));
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "fc", ParamGroup::Backbone, 3, 2, true, &mut rng);
    let head = Linear::new(&mut store, "head", ParamGroup::Head, 2, 1, true, &mut rng);
    let mut g = Graph::new(&store, true, 0);
    g.freeze(ParamGroup::Backbone);
    let x = g.constant(rand_tensor(&mut rng, &[4, 3]));
    let h = lin.forward(&mut g, x).unwrap();
    let y = head.forward(&mut g, h).unwrap();
    let l = g.sum(y);
    let grads = g.backward(l);
    assert!(grads.get(lin.w).is_none());
    assert!(grads.get(head.w).is_some());
}

#[test]
fn nonfinite_values_are_a_hard_failure() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false, 0);
    let x = g.constant(Tensor::new(vec![1], vec![1e308]).unwrap());
    let y = g.scale(x, 10.0);
    let _ = g.tanh(y);
    assert_eq!(g.nonfinite(), Some("scale"));
    assert!(matches!(g.check_finite(), Err(Error::Divergence(_))));
}
