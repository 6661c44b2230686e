use prefixrep_tensor::gradcheck::DEFAULT_STEP;
use prefixrep_tensor::{gradient_check, Graph, Result, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

/// Reduce an arbitrary output to a scalar with fixed random weights so every
/// output coordinate contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = g.constant(rand_t(g.shape(out), seed));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn check<F>(f: F, points: &[Tensor<f64>], tol: f64)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let report = gradient_check(f, points, DEFAULT_STEP, None).unwrap();
    assert!(report.max_rel_error <= tol, "{report:?}");
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::<f64>::new();
    let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[1, 1]);
    assert_eq!(g.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 5]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn matmul_gradients_match_finite_differences() {
    check(
        |g, v| {
            let c = g.matmul(v[0], v[1])?;
            weighted_sum(g, c, 7)
        },
        &[rand_t(&[4, 3], 1), rand_t(&[3, 5], 2)],
        1e-5,
    );
}

#[test]
fn batched_and_transposed_matmul_gradients() {
    // per-batch right operand
    check(
        |g, v| {
            let c = g.matmul_t(v[0], v[1])?;
            weighted_sum(g, c, 11)
        },
        &[rand_t(&[2, 3, 4, 2], 3), rand_t(&[2, 3, 5, 2], 4)],
        1e-5,
    );
    // shared right operand, transposed
    check(
        |g, v| {
            let c = g.matmul_t(v[0], v[1])?;
            weighted_sum(g, c, 12)
        },
        &[rand_t(&[2, 3, 4], 5), rand_t(&[6, 4], 6)],
        1e-5,
    );
    check(
        |g, v| {
            let c = g.matmul(v[0], v[1])?;
            weighted_sum(g, c, 13)
        },
        &[rand_t(&[2, 3, 4], 5), rand_t(&[4, 6], 6)],
        1e-5,
    );
}

#[test]
#[allow(clippy::approx_constant)]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = g.softmax(x).unwrap();
    for &p in g.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
    }
    let x = g.constant(t(&[2], &[1000.0, 0.0]));
    let y = g.softmax(x).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12 && d[1].is_finite());

    // e^0.7071 / (e^0.7071 + 1), evaluated directly
    let expected = 0.7071f64.exp() / (0.7071f64.exp() + 1.0);
    let x = g.constant(t(&[2], &[0.7071, 0.0]));
    let y = g.softmax(x).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 0.6698).abs() < 1e-3 && (d[1] - 0.3302).abs() < 1e-3);
    assert!((d[0] - expected).abs() < 1e-12);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let gain = g.constant(Tensor::full(&[4], 1.0));
    let bias = g.constant(Tensor::zeros(&[4]));
    let x = g.constant(Tensor::full(&[1, 4], 3.5));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));

    let gain = g.constant(Tensor::full(&[2], 1.0));
    let bias = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(t(&[1, 2], &[1.0, -1.0]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-4 && (d[1] + 1.0).abs() < 1e-4);

    let gain = g.constant(Tensor::full(&[8], 1.0));
    let bias = g.constant(Tensor::zeros(&[8]));
    let x = g.constant(rand_t(&[3, 8], 9));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    for row in g.value(y).data().chunks(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() <= 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() <= 1e-3, "var {var}");
    }
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let l = g.constant(t(&[1, 2], &[0.0, 0.0]));
    let loss = g.cross_entropy(l, &[0]).unwrap();
    assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);

    let l = g.constant(t(&[1, 2], &[10.0, -10.0]));
    let loss = g.cross_entropy(l, &[0]).unwrap();
    let v = g.value(loss).item();
    assert!(v > 0.0 && v < 1e-8, "{v}");

    let l = g.constant(t(&[2, 3], &[0.0; 6]));
    match g.cross_entropy(l, &[1, 3]) {
        Err(TensorError::LabelOutOfRange { index: 1, label: 3, classes: 3 }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn elementwise_and_normalization_gradients() {
    check(
        |g, v| {
            let y = g.softmax(v[0])?;
            weighted_sum(g, y, 21)
        },
        &[rand_t(&[3, 5], 20)],
        1e-4,
    );
    check(
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y, 22)
        },
        &[rand_t(&[3, 6], 23), rand_t(&[6], 24), rand_t(&[6], 25)],
        1e-4,
    );
    check(
        |g, v| {
            let y = g.cross_entropy(v[0], &[0, 2, 1, 2])?;
            Ok(y)
        },
        &[rand_t(&[4, 3], 26)],
        1e-5,
    );
    check(
        |g, v| {
            let a = g.gelu(v[0]);
            let b = g.tanh(a);
            let c = g.mul(b, v[1])?;
            let d = g.scale(c, 0.7);
            let e = g.add(d, v[0])?;
            let f = g.mul_const(e, vec![1.0, 0.0, 2.0, 1.25, 1.0, 1.0])?;
            weighted_sum(g, f, 27)
        },
        &[rand_t(&[2, 3], 28), rand_t(&[2, 3], 29)],
        1e-4,
    );
    check(
        |g, v| {
            let y = g.add_broadcast(v[0], v[1])?;
            let m = g.mean(y);
            let s = weighted_sum(g, y, 30)?;
            g.add(m, s)
        },
        &[rand_t(&[2, 3, 4], 31), rand_t(&[3, 4], 32)],
        1e-4,
    );
}

#[test]
fn shape_plumbing_gradients() {
    check(
        |g, v| {
            let e = g.embedding(v[0], &[2, 0, 2, 4, 1, 1], &[2, 3])?;
            let p = g.permute(e, &[2, 0, 1])?;
            let r = g.reshape(p, &[3, 2, 3])?;
            let n = g.narrow(r, 1, 1, 1)?;
            weighted_sum(g, n, 41)
        },
        &[rand_t(&[5, 3], 40)],
        1e-5,
    );
    check(
        |g, v| {
            let rep = g.repeat(v[1], 2);
            let c = g.concat(&[rep, v[0]], 1)?;
            let mask = Tensor::from_f64(&[2, 5], &[0.0, -1.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0])?;
            let m = g.add_key_mask(c, &mask)?;
            let s = g.softmax(m)?;
            weighted_sum(g, s, 42)
        },
        &[rand_t(&[2, 3, 5], 43), rand_t(&[2, 5], 44)],
        1e-4,
    );
}

#[test]
fn masked_keys_get_zero_weight_and_finite_grads() {
    let mut g = Graph::<f64>::new();
    let x = g.param(rand_t(&[1, 2, 3], 50));
    let mask = Tensor::from_f64(&[1, 3], &[0.0, f64::NEG_INFINITY, 0.0]).unwrap();
    let m = g.add_key_mask(x, &mask).unwrap();
    let s = g.softmax(m).unwrap();
    for row in g.value(s).data().chunks(3) {
        assert_eq!(row[1], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let loss = weighted_sum(&mut g, s, 51).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(x).unwrap();
    assert!(grad.all_finite());
    assert_eq!(grad.data()[1], 0.0);
}

#[test]
fn backward_twice_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let y = g.sum(x);
    g.backward(y).unwrap();
    assert_eq!(g.backward(y), Err(TensorError::BackwardTwice));
}

#[test]
fn frozen_leaves_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let w = g.constant(rand_t(&[3, 3], 60));
    let x = g.param(rand_t(&[2, 3], 61));
    let y = g.matmul(x, w).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(w).is_none());
    assert!(g.grad(x).is_some());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-1e4f64..1e4, 1..40), cols in 1usize..8) {
        let rows = values.len() / cols;
        prop_assume!(rows > 0);
        let data = values[..rows * cols].to_vec();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(cols) {
            prop_assert!(row.iter().all(|p| *p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_in_f32(values in prop::collection::vec(-1e4f32..1e4, 4..32)) {
        let cols = 4;
        let rows = values.len() / cols;
        let data = values[..rows * cols].to_vec();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn matmul_gradcheck_random_shapes(m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in 0u64..1000) {
        let report = gradient_check(
            |g, v| { let c = g.matmul(v[0], v[1])?; weighted_sum(g, c, seed + 1) },
            &[rand_t(&[m, k], seed), rand_t(&[k, n], seed + 2)],
            DEFAULT_STEP,
            None,
        ).unwrap();
        prop_assert!(report.max_rel_error <= 1e-4);
    }
}
