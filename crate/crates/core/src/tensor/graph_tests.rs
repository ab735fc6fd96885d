use rand::{Rng, SeedableRng};

use super::*;
use crate::channel::{ChannelRng, ComplexMatrix};
use crate::error::TensorError;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChannelRng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

const SEEDS: std::ops::Range<u64> = 0..10;

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.data(p), &[1.0, 2.0, 3.0, 4.0]);
    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.data(c), &[11.0]);
    match g.matmul(a, a) {
        Err(TensorError::Shape { lhs, rhs, .. }) => {
            assert_eq!((lhs, rhs), (vec![1, 2], vec![1, 2]))
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradients_match_finite_differences() {
    for seed in SEEDS {
        let a = rand_t(&[5, 4], seed);
        let b = rand_t(&[4, 3], seed + 100);
        let w = rand_t(&[5, 3], seed + 200);
        let r = grad_check_many(
            |g, v| {
                let p = g.matmul(v[0], v[1])?;
                let wv = g.constant(w.clone());
                let q = g.mul(p, wv)?;
                Ok(g.sum(q))
            },
            &[a, b],
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "seed {seed}: {r:?}");
    }
}

#[test]
fn batch_matmul_gradients() {
    for seed in SEEDS {
        for trans in [false, true] {
            let a = rand_t(&[2, 3, 4], seed);
            let b = if trans {
                rand_t(&[2, 5, 4], seed + 7)
            } else {
                rand_t(&[2, 4, 5], seed + 7)
            };
            let w = rand_t(&[2, 3, 5], seed + 9);
            let r = grad_check_many(
                |g, v| {
                    let p = g.batch_matmul(v[0], v[1], trans)?;
                    let wv = g.constant(w.clone());
                    let q = g.mul(p, wv)?;
                    Ok(g.sum(q))
                },
                &[a, b],
                1e-6,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-5, "seed {seed} trans {trans}: {r:?}");
        }
    }
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let r = g.relu(x);
    assert_eq!(g.data(r), &[0.0, 0.0, 2.0]);
    let z = g.constant(Tensor::zeros(vec![3]));
    let s = g.add(x, z).unwrap();
    assert_eq!(g.data(s), g.data(x));
    assert!(matches!(
        g.log(x),
        Err(TensorError::Domain { op: "log", .. })
    ));
    let big = g.constant(t(&[1], &[1e6]));
    assert!(matches!(
        g.exp(big),
        Err(TensorError::Domain { op: "exp", .. })
    ));
}

#[test]
fn gelu_gradient_at_half() {
    let x = t(&[1], &[0.5]);
    let r = grad_check(|g, v| Ok(g.gelu(v)), &x, 1e-6).unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn smooth_unary_gradients() {
    for seed in SEEDS {
        let x = rand_t(&[4, 3], seed);
        let pos =
            Tensor::new(vec![4, 3], x.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
        let w = rand_t(&[4, 3], seed + 50);
        for kind in [Unary::Gelu, Unary::Exp, Unary::Sigmoid, Unary::Log] {
            let input = if kind == Unary::Log { &pos } else { &x };
            let r = grad_check(
                |g, v| {
                    let y = g.unary(v, kind)?;
                    let wv = g.constant(w.clone());
                    let q = g.mul(y, wv)?;
                    Ok(g.sum(q))
                },
                input,
                1e-6,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-5, "{kind:?} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn kinked_unary_gradients_away_from_zero() {
    for seed in SEEDS {
        let x = rand_t(&[10], seed);
        let x = Tensor::new(
            vec![10],
            x.data()
                .iter()
                .map(|v| if v.abs() < 0.05 { 0.3 } else { *v })
                .collect(),
        )
        .unwrap();
        for kind in [Unary::Relu, Unary::Abs] {
            let r = grad_check(
                |g, v| {
                    let y = g.unary(v, kind)?;
                    let y2 = g.mul(y, y)?;
                    Ok(g.sum(y2))
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-5, "{kind:?} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn broadcast_binary_gradients() {
    for seed in SEEDS {
        let a = rand_t(&[2, 3, 4], seed);
        for bshape in [&[4][..], &[3, 4], &[2, 1, 4], &[2, 3, 4]] {
            let b = rand_t(bshape, seed + 3);
            let w = rand_t(&[2, 3, 4], seed + 4);
            let r = grad_check_many(
                |g, v| {
                    let s = g.add(v[0], v[1])?;
                    let d = g.sub(s, v[1])?;
                    let m = g.mul(d, v[1])?;
                    let wv = g.constant(w.clone());
                    let q = g.mul(m, wv)?;
                    Ok(g.sum(q))
                },
                &[a.clone(), b],
                1e-6,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-5, "{bshape:?} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[0.0, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.data(s), &[0.5, 0.5]);
    let x = g.constant(t(&[2], &[1000.0, 1000.0]));
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.data(s), &[0.5, 0.5]);
    let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let s = g.softmax(x, 0).unwrap();
    let denom: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
    for (k, &p) in g.data(s).iter().enumerate() {
        assert!((p - ((k + 1) as f64).exp() / denom).abs() < 1e-15);
    }
    assert!(g.softmax(x, 1).is_err());
}

#[test]
fn softmax_sums_to_one_and_gradients() {
    for seed in SEEDS {
        let x = rand_t(&[3, 4, 5], seed);
        for axis in 0..3 {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let s = g.softmax(v, axis).unwrap();
            let (outer, len, inner) = super::kernels::axis_split(&[3, 4, 5], axis);
            for o in 0..outer {
                for i in 0..inner {
                    let total: f64 = (0..len)
                        .map(|j| g.data(s)[o * len * inner + j * inner + i])
                        .sum();
                    assert!((total - 1.0).abs() < 1e-12);
                }
            }
            let w = rand_t(&[3, 4, 5], seed + 11);
            for log in [false, true] {
                let r = grad_check(
                    |g, v| {
                        let y = if log {
                            g.log_softmax(v, axis)?
                        } else {
                            g.softmax(v, axis)?
                        };
                        let wv = g.constant(w.clone());
                        let q = g.mul(y, wv)?;
                        Ok(g.sum(q))
                    },
                    &x,
                    1e-6,
                )
                .unwrap();
                assert!(
                    r.max_rel_error < 1e-5,
                    "axis {axis} log {log} seed {seed}: {r:?}"
                );
            }
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gain = g.constant(Tensor::full(vec![2], 1.0));
    let bias = g.constant(Tensor::zeros(vec![2]));
    let x = g.constant(t(&[1, 2], &[1.0, 3.0]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((g.data(y)[0] + expect).abs() < 1e-12 && (g.data(y)[1] - expect).abs() < 1e-12);
    let gain4 = g.constant(Tensor::full(vec![4], 2.0));
    let bias4 = g.constant(Tensor::zeros(vec![4]));
    let c = g.constant(Tensor::full(vec![1, 4], 3.5));
    let y = g.layer_norm(c, gain4, bias4, 1e-5).unwrap();
    assert!(g.data(y).iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_gradients() {
    for seed in SEEDS {
        let x = rand_t(&[3, 8], seed);
        let gain = rand_t(&[8], seed + 1);
        let bias = rand_t(&[8], seed + 2);
        let w = rand_t(&[3, 8], seed + 3);
        let r = grad_check_many(
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let wv = g.constant(w.clone());
                let q = g.mul(y, wv)?;
                Ok(g.sum(q))
            },
            &[x, gain, bias],
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "seed {seed}: {r:?}");
    }
}

#[test]
fn layout_op_gradients() {
    for seed in SEEDS {
        let x = rand_t(&[2, 3, 4], seed);
        let y = rand_t(&[2, 1, 4], seed + 1);
        let w = rand_t(&[4, 2, 3], seed + 2);
        let r = grad_check_many(
            |g, v| {
                let c = g.concat(&[v[1], v[0]], 1)?;
                let s = g.slice(c, 1, 1, 3)?;
                let p = g.permute(s, &[2, 0, 1])?;
                let r = g.reshape(p, &[4, 6])?;
                let r = g.reshape(r, &[4, 2, 3])?;
                let wv = g.constant(w.clone());
                let q = g.mul(r, wv)?;
                let head = g.slice(c, 1, 0, 1)?;
                let hq = g.mul(head, head)?;
                let a = g.sum(q);
                let b = g.mean(hq);
                g.add(a, b)
            },
            &[x, y],
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "seed {seed}: {r:?}");
    }
}

#[test]
fn complex_apply_and_power_normalize_gradients() {
    use num_complex::Complex;
    for seed in SEEDS {
        let mut rng = ChannelRng::seed_from_u64(seed);
        let mats: Vec<ComplexMatrix<f64>> = (0..2)
            .map(|_| {
                ComplexMatrix::from_fn(3, 4, |_, _| {
                    Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                })
            })
            .collect();
        let mats = std::sync::Arc::new(mats);
        let x = rand_t(&[2, 4, 6], seed + 5);
        let w = rand_t(&[2, 3, 6], seed + 6);
        let r = grad_check(
            |g, v| {
                let n = g.power_normalize(v)?;
                let y = g.complex_apply(n, mats.clone())?;
                let wv = g.constant(w.clone());
                let q = g.mul(y, wv)?;
                Ok(g.sum(q))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "seed {seed}: {r:?}");
    }
}

#[test]
fn backward_examples_and_contracts() {
    let mut g = Graph::new();
    let x = g.param(t(&[4], &[1.0, -2.0, 0.5, 3.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    assert!(matches!(g.backward(s), Err(TensorError::Contract(_))));
    g.zero_grad();
    assert!(g.grad(x).is_none());
    g.backward(s).unwrap();

    let mut g = Graph::new();
    let x = g.param(t(&[1], &[3.0]));
    let sq = g.mul(x, x).unwrap();
    g.backward(sq).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);

    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(TensorError::Contract(_))));

    // two loss terms accumulate additively
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let a = g.sum(x);
    let sq = g.mul(x, x).unwrap();
    let b = g.sum(sq);
    let l = g.add(a, b).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[3.0, 5.0]);
}

#[test]
fn unreached_parameters_get_zero_grads() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let unused = g.param(t(&[3], &[1.0, 2.0, 3.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(unused).unwrap(), &[0.0; 3]);
}

#[test]
fn grad_check_of_sum_is_exact() {
    let x = rand_t(&[3, 3], 1);
    let r = grad_check(|g, v| Ok(g.sum(v)), &x, 1e-6).unwrap();
    assert!(r.max_rel_error < 1e-9, "{r:?}");
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let a = g.constant(rand_t(&[6, 5], 4));
        let b = g.constant(rand_t(&[5, 7], 5));
        let p = g.matmul(a, b).unwrap();
        let s = g.softmax(p, 1).unwrap();
        g.data(s).to_vec()
    };
    assert_eq!(run(), run());
}
