use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Contracts `out` with fixed random weights so every output element
/// contributes to the scalar probe.
fn probe(g: &mut Graph, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(out));
    let w = g.constant(w);
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

/// Central finite differences against the analytic gradient, norm-wise
/// relative error per input.
fn fd_check(inputs: &[Tensor], tol: f64, f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).unwrap();
    let eps = 1e-5;
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vs);
        g.value(l).item()
    };
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[k])
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= eps;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rel = diff / na.max(nn).max(1e-12);
        assert!(rel <= tol, "input {k}: rel err {rel:e} (analytic {analytic:?}, numeric {numeric:?})");
    }
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(i, p) * b.at(p, j);
            }
        }
    }
    out
}

fn double_sum_corr(a: &[f64], b: &[f64]) -> Vec<f64> {
    let d = a.len();
    (0..d).map(|k| (0..d).map(|i| a[i] * b[(i + k) % d]).sum()).collect()
}

#[test]
fn matmul_identity_and_basis() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::eye(2));
    let m = g.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);

    let r = g.constant(Tensor::matrix(1, 2, vec![1., 0.]).unwrap());
    let c = g.constant(Tensor::matrix(2, 1, vec![2., 3.]).unwrap());
    let p = g.matmul(r, c).unwrap();
    assert_eq!(g.value(p).data(), &[2.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let p = g.matmul(va, vb).unwrap();
    for (x, y) in g.value(p).data().iter().zip(triple_loop(&a, &b)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, TensorError::Shape { .. }));
}

#[test]
fn softmax_closed_forms() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0., 0., 0.]));
    let s = g.softmax(x, 0).unwrap();
    for v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(Tensor::vector(vec![2f64.ln(), 0.]));
    let s = g.softmax(x, 0).unwrap();
    assert!((g.value(s).data()[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((g.value(s).data()[1] - 1.0 / 3.0).abs() < 1e-15);
    let x = g.constant(Tensor::vector(vec![1000., 0.]));
    let s = g.softmax(x, 0).unwrap();
    assert!((g.value(s).data()[0] - 1.0).abs() < 1e-12);
    assert!(g.value(s).data()[1].abs() < 1e-12);
    assert!(g.value(s).is_finite());
}

#[test]
fn softmax_bad_axis() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.softmax(x, 2), Err(TensorError::Axis { .. })));
}

#[test]
fn circular_correlation_cases() {
    let mut g = Graph::new();
    let delta = g.constant(Tensor::vector(vec![1., 0., 0., 0.]));
    let b = g.constant(Tensor::vector(vec![3., -1., 2., 5.]));
    let c = g.circular_correlation(delta, b).unwrap();
    assert_eq!(g.value(c).data(), &[3., -1., 2., 5.]);

    let a = g.constant(Tensor::vector(vec![1., 0.]));
    let b = g.constant(Tensor::vector(vec![0., 1.]));
    let c = g.circular_correlation(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[0., 1.]);

    let a = g.constant(Tensor::vector(vec![1., 0.]));
    let b = g.constant(Tensor::vector(vec![0., 1., 2.]));
    assert!(matches!(g.circular_correlation(a, b), Err(TensorError::Shape { .. })));
}

#[test]
fn circular_correlation_matches_double_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for d in 1..=16 {
        let a = rand_tensor(&mut rng, &[d]);
        let b = rand_tensor(&mut rng, &[d]);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.circular_correlation(va, vb).unwrap();
        let oracle = double_sum_corr(a.data(), b.data());
        for (x, y) in g.value(c).data().iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_closed_forms() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1., 2., 3.]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1., 1., 1.]);

    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let sq = g.mul(x, x).unwrap();
    g.backward(sq).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[6.]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1., 2.]));
    let y = g.tanh(x);
    assert!(matches!(g.backward(y), Err(TensorError::Contract(_))));
}

#[test]
fn backward_twice_accumulates() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.5, -1.0]));
    let y = g.tanh(x);
    let s = g.sum(y);
    g.backward(s).unwrap();
    let once = g.grad(x).unwrap();
    g.backward(s).unwrap();
    let twice = g.grad(x).unwrap();
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn dropout_eval_identity_and_seeded_train() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[4, 4], 1.0));
    let y = g.dropout(x, 0.5, 9).unwrap();
    assert_eq!(x, y);

    let mut g1 = Graph::training();
    let x1 = g1.param(Tensor::full(&[4, 4], 1.0));
    let y1 = g1.dropout(x1, 0.5, 9).unwrap();
    let mut g2 = Graph::training();
    let x2 = g2.param(Tensor::full(&[4, 4], 1.0));
    let y2 = g2.dropout(x2, 0.5, 9).unwrap();
    assert_eq!(g1.value(y1), g2.value(y2));
    assert!(g1.value(y1).data().iter().all(|v| *v == 0.0 || *v == 2.0));
}

#[test]
fn cosine_zero_norm_is_zero() {
    let mut g = Graph::new();
    let a = g.param(Tensor::matrix(2, 2, vec![0., 0., 1., 1.]).unwrap());
    let b = g.param(Tensor::matrix(1, 2, vec![1., 0.]).unwrap());
    let c = g.cosine_rows(a, b).unwrap();
    assert_eq!(g.value(c).data()[0], 0.0);
    assert!((g.value(c).data()[1] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    let s = g.sum(c);
    g.backward(s).unwrap();
    assert_eq!(&g.grad(a).unwrap().data()[..2], &[0., 0.]);
}

#[test]
fn loss_closed_forms() {
    let mut g = Graph::new();
    let z = g.param(Tensor::vector(vec![0.0, 0.0]));
    let l = g.bce_with_logits(z, &[1.0, 0.0], 1.0).unwrap();
    assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);

    let z = g.param(Tensor::vector(vec![40.0, -40.0]));
    let l = g.bce_with_logits(z, &[1.0, 0.0], 1.0).unwrap();
    assert!(g.value(l).item() < 1e-6);

    let z = g.param(Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap());
    let l = g.cross_entropy(z, &[1]).unwrap();
    assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-15);
}

const TOL: f64 = 1e-4;

#[test]
fn gradcheck_elementwise_and_scalar_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    fd_check(&[a.clone(), b.clone()], TOL, |g, v| {
        let x = g.add(v[0], v[1]).unwrap();
        probe(g, x, 2)
    });
    fd_check(&[a.clone(), b.clone()], TOL, |g, v| {
        let x = g.sub(v[0], v[1]).unwrap();
        probe(g, x, 3)
    });
    fd_check(&[a.clone(), b.clone()], TOL, |g, v| {
        let x = g.mul(v[0], v[1]).unwrap();
        probe(g, x, 4)
    });
    fd_check(&[a.clone()], TOL, |g, v| {
        let x = g.scale(v[0], -1.7);
        let x = g.add_scalar(x, 0.3);
        probe(g, x, 5)
    });
    fd_check(&[a.clone()], TOL, |g, v| {
        let x = g.tanh(v[0]);
        probe(g, x, 6)
    });
    fd_check(&[a.clone()], TOL, |g, v| {
        let x = g.relu(v[0]);
        probe(g, x, 7)
    });
    fd_check(&[a.clone()], TOL, |g, v| {
        let x = g.sigmoid(v[0]);
        probe(g, x, 8)
    });
}

#[test]
fn gradcheck_matrix_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    fd_check(&[a.clone(), b.clone()], TOL, |g, v| {
        let x = g.matmul(v[0], v[1]).unwrap();
        probe(g, x, 9)
    });
    fd_check(&[a.clone()], TOL, |g, v| {
        let x = g.transpose(v[0]).unwrap();
        probe(g, x, 10)
    });
    fd_check(&[a.clone()], TOL, |g, v| {
        let x = g.softmax(v[0], 1).unwrap();
        probe(g, x, 11)
    });
    fd_check(&[a.clone()], TOL, |g, v| {
        let x = g.softmax(v[0], 0).unwrap();
        probe(g, x, 12)
    });
    fd_check(&[a.clone()], TOL, |g, v| {
        let x = g.sum_axis(v[0], 0).unwrap();
        probe(g, x, 13)
    });
    fd_check(&[a.clone()], TOL, |g, v| {
        let x = g.mean(v[0]);
        let y = g.sum(v[0]);
        let z = g.scale(y, 0.1);
        g.add(x, z).unwrap()
    });
    fd_check(&[a.clone()], TOL, |g, v| {
        let x = g.layer_norm(v[0], 1e-5).unwrap();
        probe(g, x, 14)
    });
    fd_check(&[a.clone()], TOL, |g, v| {
        let x = g.reshape(v[0], &[4, 3]).unwrap();
        probe(g, x, 15)
    });
}

#[test]
fn gradcheck_indexing_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[5, 3]);
    let b = rand_tensor(&mut rng, &[2, 3]);
    fd_check(&[a.clone(), b.clone()], TOL, |g, v| {
        let x = g.concat(&[v[0], v[1]], 0).unwrap();
        probe(g, x, 16)
    });
    fd_check(&[a.clone()], TOL, |g, v| {
        let x = g.concat(&[v[0], v[0]], 1).unwrap();
        probe(g, x, 17)
    });
    fd_check(&[a.clone()], TOL, |g, v| {
        let x = g.narrow(v[0], 1, 1, 2).unwrap();
        probe(g, x, 18)
    });
    fd_check(&[a.clone()], TOL, |g, v| {
        let x = g.gather_rows(v[0], &[4, 0, 4, 2]).unwrap();
        probe(g, x, 19)
    });
    fd_check(&[a.clone()], TOL, |g, v| {
        let x = g.scatter_add_rows(v[0], &[1, 0, 1, 3, 1], 4).unwrap();
        probe(g, x, 20)
    });
    fd_check(&[a.clone()], TOL, |g, v| {
        let x = g.segment_mean(v[0], &[vec![0, 1], vec![4], vec![2, 3, 4]]).unwrap();
        probe(g, x, 21)
    });
    let row = rand_tensor(&mut rng, &[3]);
    fd_check(&[row.clone()], TOL, |g, v| {
        let x = g.repeat_rows(v[0], 4).unwrap();
        probe(g, x, 22)
    });
    fd_check(&[row], TOL, |g, v| {
        let x = g.repeat_cols(v[0], 5).unwrap();
        probe(g, x, 23)
    });
}

#[test]
fn gradcheck_composition_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, &[3, 5]);
    let b = rand_tensor(&mut rng, &[3, 5]);
    fd_check(&[a.clone(), b.clone()], TOL, |g, v| {
        let x = g.circular_correlation(v[0], v[1]).unwrap();
        probe(g, x, 24)
    });
    let c = rand_tensor(&mut rng, &[4, 5]);
    fd_check(&[a.clone(), c], TOL, |g, v| {
        let x = g.cosine_rows(v[0], v[1]).unwrap();
        probe(g, x, 25)
    });
    fd_check(&[a.clone()], TOL, |g, v| {
        g.set_training(true);
        let x = g.dropout(v[0], 0.3, 77).unwrap();
        probe(g, x, 26)
    });
    let targets: Vec<f64> = (0..15).map(|i| (i % 2) as f64).collect();
    fd_check(&[a.clone()], TOL, |g, v| g.bce_with_logits(v[0], &targets, 2.0).unwrap());
    fd_check(&[a], TOL, |g, v| g.cross_entropy(v[0], &[0, 4, 2]).unwrap());
}

#[test]
fn composite_graph_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[4, 3]);
    let w = rand_tensor(&mut rng, &[3, 3]);
    let h = rand_tensor(&mut rng, &[2, 3]);
    fd_check(&[x, w, h], TOL, |g, v| {
        let q = g.matmul(v[2], v[1]).unwrap();
        let xt = g.transpose(v[0]).unwrap();
        let s = g.matmul(q, xt).unwrap();
        let a = g.softmax(s, 1).unwrap();
        let o = g.matmul(a, v[0]).unwrap();
        let t = g.tanh(o);
        probe(g, t, 27)
    });
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_permute(vals in prop::collection::vec(-50.0f64..50.0, 2..12), rot in 0usize..12) {
            let n = vals.len();
            let mut g = Graph::new();
            let x = g.constant(Tensor::vector(vals.clone()));
            let s = g.softmax(x, 0).unwrap();
            let sum: f64 = g.value(s).data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(g.value(s).data().iter().all(|v| *v >= 0.0));

            let r = rot % n;
            let mut permuted = vals.clone();
            permuted.rotate_left(r);
            let xp = g.constant(Tensor::vector(permuted));
            let sp = g.softmax(xp, 0).unwrap();
            let mut expect = g.value(s).data().to_vec();
            expect.rotate_left(r);
            for (a, b) in g.value(sp).data().iter().zip(&expect) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }

        #[test]
        fn delta_kernel_is_identity(vals in prop::collection::vec(-2.0f64..2.0, 1..16)) {
            let d = vals.len();
            let mut delta = vec![0.0; d];
            delta[0] = 1.0;
            let mut g = Graph::new();
            let a = g.constant(Tensor::vector(delta));
            let b = g.constant(Tensor::vector(vals.clone()));
            let c = g.circular_correlation(a, b).unwrap();
            prop_assert_eq!(g.value(c).data(), vals.as_slice());
        }
    }
}
