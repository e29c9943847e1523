use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

/// Central-difference check of `f` against reverse mode for every input
/// coordinate; returns the max relative error.
fn fd_check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|v| g.constant(v.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|v| g.param(v.clone())).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i]).unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Weighted sum so that every output coordinate gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    let w = rand_t(g.shape(x), seed);
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

#[test]
fn matmul_identity_and_projector() {
    let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(matmul(&Tensor::eye(2), &m).unwrap(), m);
    let p = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
    let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
    assert_eq!(matmul(&p, &b).unwrap().data(), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let err = fd_check(&[rand_t(&[3, 4], 1), rand_t(&[4, 2], 2)], |g, v| {
        let c = g.matmul(v[0], v[1]).unwrap();
        weighted_sum(g, c, 3)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn batched_matmul_gradients() {
    for trans in [false, true] {
        let b_shape = if trans { [2, 5, 4] } else { [2, 4, 5] };
        let err = fd_check(&[rand_t(&[2, 3, 4], 4), rand_t(&b_shape, 5)], |g, v| {
            let c = g.bmm(v[0], v[1], trans).unwrap();
            weighted_sum(g, c, 6)
        });
        assert!(err < 1e-6, "trans={trans} rel err {err}");
    }
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
    let w = softmax(&[0.0, -1.0]).unwrap();
    let e = (-1.0f64).exp();
    assert!((w[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
    assert!((w[0] - 0.731058).abs() < 1e-6 && (w[1] - 0.268941).abs() < 1e-6);
    let w = softmax(&[1000.0, 0.0]).unwrap();
    assert_eq!(w[0], 1.0);
    assert!(w[1].is_finite() && w[1] < 1e-300);
    assert!(softmax(&[]).is_err());
}

#[test]
fn softmax_along_inner_axis() {
    let mut g = Graph::new();
    let x = g.constant(rand_t(&[3, 4, 2], 7));
    let y = g.softmax(x, 1).unwrap();
    let v = g.value(y).data();
    for o in 0..3 {
        for i in 0..2 {
            let s: f64 = (0..4).map(|l| v[(o * 4 + l) * 2 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
    let empty = g.constant(Tensor::zeros(&[2, 0]));
    assert!(g.softmax(empty, 1).is_err());
}

#[test]
fn softmax_gradient() {
    let err = fd_check(&[rand_t(&[3, 5], 8)], |g, v| {
        let s = g.softmax(v[0], 1).unwrap();
        weighted_sum(g, s, 9)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let ones = g.constant(Tensor::full(&[4], 1.0));
    let zeros4 = g.constant(Tensor::zeros(&[4]));
    let c = g.constant(Tensor::full(&[1, 4], 3.5));
    let y = g.layer_norm(c, ones, zeros4).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));

    let gain = g.constant(Tensor::full(&[2], 1.0));
    let bias = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(t(&[1, 2], &[1.0, 3.0]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((g.value(y).data()[0] + expect).abs() < 1e-12);
    assert!((g.value(y).data()[1] - expect).abs() < 1e-12);
    assert!((expect - 1.0).abs() < 1e-5);

    let empty = g.constant(Tensor::zeros(&[3, 0]));
    let e0 = g.constant(Tensor::zeros(&[0]));
    assert!(g.layer_norm(empty, e0, e0).is_err());
}

#[test]
fn layer_norm_rows_are_standardized() {
    let mut g = Graph::new();
    let x = rand_t(&[5, 16], 10).data().iter().map(|v| v * 100.0).collect();
    let x = g.constant(Tensor::new(vec![5, 16], x).unwrap());
    let gain = g.constant(Tensor::full(&[16], 1.0));
    let bias = g.constant(Tensor::zeros(&[16]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    for row in g.value(y).data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-10);
        // Raw variance is in the thousands, so the epsilon shifts it by < 1e-8.
        assert!((var - 1.0).abs() < 1e-8, "{var}");
    }
}

#[test]
fn layer_norm_gradient() {
    let err = fd_check(
        &[rand_t(&[4, 8], 11), rand_t(&[8], 12), rand_t(&[8], 13)],
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
            weighted_sum(g, y, 14)
        },
    );
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn backward_trivial_cases() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[1.0, -2.0, 5.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.param(t(&[1], &[2.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0]);
}

#[test]
fn backward_rejects_non_scalar_and_double_calls() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let y = g.scale(x, 2.0);
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::Contract(_))));
    g.reset();
    assert!(g.is_empty());
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let c = g.constant(t(&[2], &[3.0, 4.0]));
    let p = g.mul(x, c).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
    assert!(g.grad(c).is_none());
}

#[test]
fn elementwise_gradients() {
    let inputs = [rand_t(&[2, 3], 20), rand_t(&[2, 3], 21)];
    type Binary = fn(&mut Graph, Var, Var) -> Result<Var>;
    let binaries: [(&str, Binary); 3] = [("add", Graph::add), ("sub", Graph::sub), ("mul", Graph::mul)];
    for (name, op) in binaries {
        let err = fd_check(&inputs, |g, v| {
            let y = op(g, v[0], v[1]).unwrap();
            weighted_sum(g, y, 22)
        });
        assert!(err < 1e-6, "{name}: {err}");
    }
    type Unary = fn(&mut Graph, Var) -> Var;
    let unaries: [(&str, Unary); 4] = [
        ("relu", Graph::relu),
        ("sigmoid", Graph::sigmoid),
        ("tanh", Graph::tanh),
        ("abs", Graph::abs),
    ];
    for (name, op) in unaries {
        let err = fd_check(&inputs[..1], |g, v| {
            let y = op(g, v[0]);
            weighted_sum(g, y, 23)
        });
        assert!(err < 1e-6, "{name}: {err}");
    }
}

#[test]
fn unary_trivial_values() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[3]));
    let s = g.sigmoid(z);
    assert!(g.value(s).data().iter().all(|v| *v == 0.5));
    let th = g.tanh(z);
    assert!(g.value(th).data().iter().all(|v| *v == 0.0));
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let big = g.constant(t(&[2], &[-800.0, 800.0]));
    let s = g.sigmoid(big);
    assert_eq!(g.value(s).data(), &[0.0, 1.0]);
}

#[test]
fn structural_gradients() {
    let err = fd_check(&[rand_t(&[2, 3, 4], 30), rand_t(&[3, 4], 31)], |g, v| {
        let y = g.add_trailing(v[0], v[1]).unwrap();
        weighted_sum(g, y, 32)
    });
    assert!(err < 1e-6, "add_trailing {err}");

    let err = fd_check(&[rand_t(&[2, 3, 4], 33)], |g, v| {
        let y = g.permute(v[0], &[1, 2, 0]).unwrap();
        let y = g.transpose(y).unwrap();
        let y = g.reshape(y, &[6, 4]).unwrap();
        weighted_sum(g, y, 34)
    });
    assert!(err < 1e-6, "permute {err}");

    let err = fd_check(&[rand_t(&[2, 3, 4], 35), rand_t(&[2, 1, 4], 36)], |g, v| {
        let y = g.concat(&[v[0], v[1], v[0]], 1).unwrap();
        let y = g.slice(y, 1, 2, 4).unwrap();
        weighted_sum(g, y, 37)
    });
    assert!(err < 1e-6, "concat/slice {err}");

    let err = fd_check(&[rand_t(&[2, 3, 4], 38)], |g, v| {
        let y = g.sum_axis(v[0], 1).unwrap();
        let y = g.scale(y, 0.5);
        let w = weighted_sum(g, y, 39);
        let m = g.mean(v[0]);
        g.add(w, m).unwrap()
    });
    assert!(err < 1e-6, "reductions {err}");
}

#[test]
fn structural_trivial_values() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let tr = g.transpose(x).unwrap();
    assert_eq!(g.value(tr).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    let sl = g.slice(x, 1, 1, 2).unwrap();
    assert_eq!(g.value(sl).data(), &[2.0, 3.0, 5.0, 6.0]);
    let cat = g.concat(&[x, x], 0).unwrap();
    assert_eq!(g.shape(cat), &[4, 3]);
    let rs = g.sum_axis(x, 0).unwrap();
    assert_eq!(g.value(rs).data(), &[5.0, 7.0, 9.0]);
    assert!(g.slice(x, 1, 2, 2).is_err());
    assert!(g.permute(x, &[0, 0]).is_err());
}

#[test]
fn fan_out_accumulates() {
    // y = x·x + 3x, dy/dx = 2x + 3
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, -4.0]));
    let sq = g.mul(x, x).unwrap();
    let lin = g.scale(x, 3.0);
    let y = g.add(sq, lin).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[5.0, -5.0]);
}

#[test]
fn forward_ops_are_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let a = g.constant(rand_t(&[8, 16], 40));
        let b = g.constant(rand_t(&[16, 8], 41));
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax(c, 1).unwrap();
        g.value(s).clone()
    };
    assert_eq!(run().data(), run().data());
}

proptest! {
    #[test]
    fn softmax_is_a_probability_vector(xs in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let w = softmax(&xs).unwrap();
        prop_assert!(w.iter().all(|v| *v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
