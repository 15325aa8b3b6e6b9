//! Finite-difference checks for every differentiable graph operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenct_core::numerics::{ConvSpec, Graph, Var};
use tokenct_core::Tensor;

const STEP: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Compares reverse-mode gradients of `f` against central differences.
fn check(inputs: &[Tensor<f64>], tol: f64, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let build = |ts: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        (g, vars, out)
    };
    let (g, vars, out) = build(inputs);
    let grads = g.backward(out).unwrap();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, inputs[k].len());
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let (gp, _, op) = build(&plus);
            let (gm, _, om) = build(&minus);
            let numeric = (gp.value(op).data()[0] - gm.value(om).data()[0]) / (2.0 * STEP);
            let err = (analytic[i] - numeric).abs();
            let scale = analytic[i].abs().max(numeric.abs());
            assert!(err <= tol * scale || err <= 1e-6, "input {k}[{i}]: analytic {} vs numeric {numeric}", analytic[i]);
        }
    }
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.shape(x));
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

#[test]
fn matmul_identity_and_projection() {
    let mut g = Graph::<f64>::new();
    let i = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let p = g.matmul(i, m).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    let a = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap());
    let b = g.constant(Tensor::from_f64(&[2, 1], &[5.0, 7.0]).unwrap());
    let p = g.matmul(a, b).unwrap();
    assert_eq!(g.value(p).data(), &[5.0, 0.0]);
    let bad = g.constant(Tensor::zeros(&[3, 1]));
    let err = g.matmul(a, bad).unwrap_err();
    assert!(matches!(err, tokenct_core::Error::Dimension(_)));
}

#[test]
fn matmul_gradient_of_sum_is_ones_times_b_transposed() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2]));
    let mut g = Graph::new();
    let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
    let p = g.matmul(va, vb).unwrap();
    let s = g.sum(p);
    let grads = g.backward(s).unwrap();
    let ga = grads.get(va).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expected: f64 = b.data()[k * 2..k * 2 + 2].iter().sum();
            assert!((ga[i * 4 + k] - expected).abs() < 1e-12);
        }
    }
    check(&[a, b], 1e-5, |g, v| {
        let p = g.matmul(v[0], v[1]).unwrap();
        g.sum(p)
    });
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for rank in [2, 3] {
        let shape: Vec<usize> = if rank == 2 { vec![1, 1, 4, 5] } else { vec![1, 1, 3, 4, 5] };
        let x = random(&mut rng, &shape);
        let kshape: Vec<usize> = vec![1; rank + 2];
        let mut g = Graph::new();
        let vx = g.constant(x.clone());
        let k = g.constant(Tensor::full(&kshape, 1.0));
        let y = g.conv(vx, k, ConvSpec::new(rank, 1, 0)).unwrap();
        assert_eq!(g.value(y), &x);
    }
}

#[test]
fn conv_of_ones_sums_window() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 1, 5, 5], 1.0));
    let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv(x, k, ConvSpec::new(2, 1, 0)).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 3, 3]);
    assert!(g.value(y).data().iter().all(|&v| v == 9.0));
}

#[test]
fn conv_rejects_bad_geometry() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(g.conv(x, k, ConvSpec::new(2, 1, 0)).is_err());
    let k = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
    assert!(g.conv(x, k, ConvSpec::new(2, 1, 0)).is_err());
    assert!(g.conv(x, k, ConvSpec::new(2, 1, 1)).is_ok());
}

#[test]
fn conv_output_extent_formula() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 3, 9, 8, 7]));
    let k = g.constant(Tensor::zeros(&[4, 3, 4, 4, 4]));
    let y = g.conv(x, k, ConvSpec::new(3, 2, 1)).unwrap();
    // floor((in + 2 - 4)/2) + 1
    assert_eq!(g.shape(y), &[2, 4, 4, 4, 3]);
    let t = g.constant(Tensor::zeros(&[4, 3, 4, 4, 4]));
    let z = g.conv_transpose(y, t, ConvSpec::new(3, 2, 1)).unwrap();
    assert_eq!(g.shape(z), &[2, 3, 8, 8, 6]);
}

#[test]
fn conv3d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[1, 1, 4, 4, 4]);
    let k = random(&mut rng, &[1, 1, 2, 2, 2]);
    check(&[x, k], 1e-4, |g, v| {
        let y = g.conv(v[0], v[1], ConvSpec::new(3, 1, 0)).unwrap();
        weighted(g, y, 30)
    });
    let x = random(&mut rng, &[2, 2, 5, 4, 4]);
    let k = random(&mut rng, &[3, 2, 3, 3, 3]);
    check(&[x, k], 1e-4, |g, v| {
        let y = g.conv(v[0], v[1], ConvSpec::new(3, 2, 1)).unwrap();
        weighted(g, y, 31)
    });
}

#[test]
fn conv2d_and_transpose_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[2, 2, 6, 6]);
    let k = random(&mut rng, &[3, 2, 4, 4]);
    check(&[x, k], 1e-4, |g, v| {
        let y = g.conv(v[0], v[1], ConvSpec::new(2, 2, 1)).unwrap();
        weighted(g, y, 40)
    });
    let x = random(&mut rng, &[2, 3, 3, 3]);
    let k = random(&mut rng, &[3, 2, 4, 4]);
    check(&[x, k], 1e-4, |g, v| {
        let y = g.conv_transpose(v[0], v[1], ConvSpec::new(2, 2, 1)).unwrap();
        weighted(g, y, 41)
    });
    let x = random(&mut rng, &[1, 2, 2, 2, 2]);
    let k = random(&mut rng, &[2, 1, 4, 4, 4]);
    check(&[x, k], 1e-4, |g, v| {
        let y = g.conv_transpose(v[0], v[1], ConvSpec::new(3, 2, 1)).unwrap();
        weighted(g, y, 42)
    });
}

#[test]
fn softmax_properties() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    let x = g.constant(Tensor::from_f64(&[2], &[1000.0, 0.0]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(s).data()[0], 1.0);
    assert!(g.value(s).data()[1].is_finite() && g.value(s).data()[1] < 1e-300);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = random(&mut rng, &[8]);
    let x = g.constant(v.clone());
    let s = g.softmax(x, 0).unwrap();
    let out = g.value(s).data();
    assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let argmax = |d: &[f64]| d.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert_eq!(argmax(out), argmax(v.data()));
    assert!(g.softmax(x, 1).is_err());
}

#[test]
fn softmax_gradients_along_each_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[3, 4, 2]);
    for axis in 0..3 {
        check(std::slice::from_ref(&x), 1e-4, |g, v| {
            let s = g.softmax(v[0], axis).unwrap();
            weighted(g, s, 60 + axis as u64)
        });
    }
}

#[test]
fn cross_entropy_values() {
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::from_f64(&[1, 4], &[0.0, 20.0, 0.0, 0.0]).unwrap());
    let ce = g.cross_entropy(l, &[1]).unwrap();
    assert!(g.value(ce).data()[0] < 1e-8);
    let u = g.constant(Tensor::zeros(&[3, 8]));
    let ce = g.cross_entropy(u, &[0, 5, 7]).unwrap();
    assert!((g.value(ce).data()[0] - 8f64.ln()).abs() < 1e-12);
    assert!(matches!(g.cross_entropy(u, &[0, 8, 1]), Err(tokenct_core::Error::Index(_))));
}

#[test]
fn cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = random(&mut rng, &[5, 10]);
    let targets = [3, 0, 9, 3, 5];
    check(std::slice::from_ref(&logits), 1e-5, |g, v| g.cross_entropy(v[0], &targets).unwrap());
    // closed form: (softmax − onehot)/T
    let mut g = Graph::new();
    let v = g.input(logits.clone());
    let ce = g.cross_entropy(v, &targets).unwrap();
    let grads = g.backward(ce).unwrap();
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits.data()[r * 10..r * 10 + 10];
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        for k in 0..10 {
            let expected = (row[k].exp() / z - if k == t { 1.0 } else { 0.0 }) / 5.0;
            assert!((grads.get(v).unwrap()[r * 10 + k] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_values() {
    let mut g = Graph::<f64>::new();
    let ones = g.constant(Tensor::full(&[2], 1.0));
    let zeros = g.constant(Tensor::zeros(&[2]));
    let c = g.constant(Tensor::full(&[1, 2], 3.0));
    let y = g.layer_norm(c, ones, zeros).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    let x = g.constant(Tensor::from_f64(&[1, 2], &[1.0, -1.0]).unwrap());
    let y = g.layer_norm(x, ones, zeros).unwrap();
    // variance 1, so output is (±1)/sqrt(1 + 1e-5)
    let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((g.value(y).data()[0] - expected).abs() < 1e-15);
    assert!((g.value(y).data()[1] + expected).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ones = g.constant(Tensor::full(&[64], 1.0));
    let zeros = g.constant(Tensor::zeros(&[64]));
    let x = g.constant(random(&mut rng, &[3, 64]));
    let y = g.layer_norm(x, ones, zeros).unwrap();
    for row in g.value(y).data().chunks(64) {
        let mean = row.iter().sum::<f64>() / 64.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-3);
    }
    let bad = g.constant(Tensor::zeros(&[3]));
    assert!(g.layer_norm(x, bad, zeros).is_err());
}

#[test]
fn normalization_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[3, 6]);
    let gain = random(&mut rng, &[6]);
    let bias = random(&mut rng, &[6]);
    check(&[x, gain, bias], 1e-4, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
        weighted(g, y, 90)
    });
    let x = random(&mut rng, &[2, 4, 3, 2]);
    let gain = random(&mut rng, &[4]);
    let bias = random(&mut rng, &[4]);
    check(&[x, gain, bias], 1e-4, |g, v| {
        let y = g.group_norm(v[0], v[1], v[2], 2).unwrap();
        weighted(g, y, 91)
    });
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = random(&mut rng, &[2, 3]);
    let b = random(&mut rng, &[2, 3]);
    let bias = random(&mut rng, &[3]);
    check(&[a.clone(), b.clone()], 1e-4, |g, v| {
        let s = g.add(v[0], v[1]).unwrap();
        let d = g.sub(s, v[1]).unwrap();
        let m = g.mul(d, v[1]).unwrap();
        let t = g.tanh(m);
        let u = g.silu(t);
        let q = g.square(u);
        let w = g.scale(q, -1.5);
        let r = g.abs(w);
        let sm = g.slice_mean(r, 3).unwrap();
        let mn = g.mean(v[0]);
        g.add(sm, mn).unwrap()
    });
    check(&[a.clone(), bias], 1e-4, |g, v| {
        let y = g.add_row_bias(v[0], v[1]).unwrap();
        weighted(g, y, 100)
    });
    let x = random(&mut rng, &[2, 3, 2, 2]);
    let cb = random(&mut rng, &[3]);
    check(&[x.clone(), cb], 1e-4, |g, v| {
        let y = g.add_channel_bias(v[0], v[1]).unwrap();
        weighted(g, y, 101)
    });
    check(&[x], 1e-4, |g, v| {
        let y = g.channels_last(v[0]).unwrap();
        let y = g.scale(y, 2.0);
        let z = g.channels_first(y, &[2, 3, 2, 2]).unwrap();
        let z = g.reshape(z, &[24]).unwrap();
        weighted(g, z, 102)
    });
    let table = random(&mut rng, &[5, 3]);
    check(&[table], 1e-4, |g, v| {
        let y = g.embedding(v[0], &[4, 0, 4, 2]).unwrap();
        weighted(g, y, 103)
    });
}

#[test]
fn attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let qkv = random(&mut rng, &[2 * 4, 3 * 6]);
    check(&[qkv], 1e-4, |g, v| {
        let y = g.causal_attention(v[0], 2, 3).unwrap();
        weighted(g, y, 110)
    });
}

#[test]
fn backward_basics() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&mut rng, &[2, 3, 4]);
    let y = random(&mut rng, &[2, 3, 4]);
    let mut g = Graph::new();
    let (vx, vy) = (g.input(x.clone()), g.input(y.clone()));
    let s = g.sum(vx);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(vx).unwrap().iter().all(|&v| v == 1.0));
    let p = g.mul(vx, vy).unwrap();
    let s = g.sum(p);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(vx).unwrap(), y.data());
    assert_eq!(grads.get(vy).unwrap(), x.data());
    assert!(matches!(g.backward(p), Err(tokenct_core::Error::Usage(_))));
}

#[test]
fn stop_gradient_and_straight_through() {
    let mut g = Graph::<f64>::new();
    let z = g.input(Tensor::from_f64(&[3], &[0.1, 0.2, 0.3]).unwrap());
    let e = Tensor::from_f64(&[3], &[1.0, 1.0, 1.0]).unwrap();
    let q = g.straight_through(z, &e).unwrap();
    assert_eq!(g.value(q), &e);
    let sq = g.square(q);
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    // identity pass-through of d/dq (q²) = 2q = 2
    assert_eq!(grads.get(z).unwrap(), &[2.0, 2.0, 2.0]);
    let d = g.detach(z);
    let s = g.sum(d);
    assert!(g.backward(s).unwrap().get(z).is_none());
}
