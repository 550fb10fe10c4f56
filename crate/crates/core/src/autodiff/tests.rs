use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

/// Random weights so that a scalar projection of a non-scalar output is
/// sensitive to every entry.
fn project(g: &mut Graph, y: Var, rng_seed: u64) -> Var {
    let (r, c) = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = g.constant(random_tensor(&mut rng, r, c, -1.0, 1.0));
    let p = g.mul(y, w);
    g.sum(p)
}

#[test]
fn matmul_hand_example() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let b = g.constant(Tensor::col(vec![1.0, 1.0]));
    let c = g.matmul(a, b);
    assert_eq!(g.value(c), &Tensor::col(vec![3.0, 7.0]));
}

#[test]
fn logsumexp_uniform() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::row(vec![0.0, 0.0, 0.0]));
    let l = g.logsumexp(a);
    assert_abs_diff_eq!(g.scalar(l), 3f64.ln(), epsilon = 1e-15);
    assert_abs_diff_eq!(g.scalar(l), 1.0986, epsilon = 1e-4);
}

#[test]
fn clip_values() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::row(vec![1.7, -0.3, 0.4]));
    let c = g.clip(a, 0.0, 1.0);
    assert_eq!(g.value(c).data(), &[1.0, 0.0, 0.4]);
}

#[test]
fn square_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0));
    let y = g.square(x);
    let grads = g.grad(y, &[x]).unwrap();
    assert_eq!(g.scalar(grads[0]), 6.0);
}

#[test]
fn clip_subgradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::row(vec![-0.3, 0.5, 1.7]));
    let c = g.clip(x, 0.0, 1.0);
    let s = g.sum(c);
    let grads = g.grad(s, &[x]).unwrap();
    assert_eq!(g.value(grads[0]).data(), &[0.0, 1.0, 0.0]);

    // exactly on the boundary the subgradient is zero too
    let mut g = Graph::new();
    let x = g.leaf(Tensor::row(vec![0.0, 1.0]));
    let c = g.clip(x, 0.0, 1.0);
    let s = g.sum(c);
    let grads = g.grad(s, &[x]).unwrap();
    assert_eq!(g.value(grads[0]).data(), &[0.0, 0.0]);
}

#[test]
fn double_backward_squared_gradient_norm() {
    // f = x^3, f' = 3x^2 = 12 at x=2, g = f'^2 = 144, g' = 2 f' f'' = 2*12*12 = 288
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(2.0));
    let x2 = g.square(x);
    let f = g.mul(x2, x);
    let df = g.grad(f, &[x]).unwrap()[0];
    assert_abs_diff_eq!(g.scalar(df), 12.0, epsilon = 1e-12);
    let gn = g.square(df);
    let gn = g.sum(gn);
    assert_abs_diff_eq!(g.scalar(gn), 144.0, epsilon = 1e-10);
    let dg = g.grad(gn, &[x]).unwrap()[0];
    assert_abs_diff_eq!(g.scalar(dg), 288.0, epsilon = 1e-10);

    let err = finite_diff_check(
        |g, x| {
            let x2 = g.square(x);
            let f = g.mul(x2, x);
            let df = g.grad(f, &[x]).unwrap()[0];
            let sq = g.square(df);
            g.sum(sq)
        },
        &Tensor::scalar(2.0),
        1e-5,
    );
    assert!(err < 1e-7, "{err}");
}

#[test]
fn finite_diff_quadratic_and_constant() {
    let err = finite_diff_check(
        |g, x| {
            let y = g.square(x);
            g.sum(y)
        },
        &Tensor::scalar(3.0),
        1e-4,
    );
    assert!(err < 1e-6, "{err}");

    let err = finite_diff_check(
        |g, _x| g.scalar_constant(4.0),
        &Tensor::row(vec![1.0, 2.0]),
        1e-4,
    );
    assert_eq!(err, 0.0);
}

fn two_layer_net(g: &mut Graph, params: &[Var], input: &Tensor) -> Var {
    let x = g.constant(input.clone());
    let h = g.matmul(x, params[0]);
    let h = g.add(h, params[1]);
    let h = g.tanh(h);
    let o = g.matmul(h, params[2]);
    let o = g.add(o, params[3]);
    let o = g.tanh(o);
    let sq = g.square(o);
    g.sum(sq)
}

/// 3 -> 3 -> 2 tanh network: 9 + 3 + 6 + 2 = 20 parameters.
fn random_net_point(seed: u64) -> (Vec<Tensor>, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = vec![
        random_tensor(&mut rng, 3, 3, -1.0, 1.0),
        random_tensor(&mut rng, 1, 3, -0.5, 0.5),
        random_tensor(&mut rng, 3, 2, -1.0, 1.0),
        random_tensor(&mut rng, 1, 2, -0.5, 0.5),
    ];
    let input = random_tensor(&mut rng, 2, 3, -1.0, 1.0);
    (params, input)
}

#[test]
fn finite_diff_two_layer_tanh_net() {
    let (params, input) = random_net_point(7);
    assert_eq!(params.iter().map(Tensor::len).sum::<usize>(), 20);
    let check = check_gradient(|g, p| two_layer_net(g, p, &input), &params, 1e-5);
    assert!(check.max_rel_error < 1e-4, "{check:?}");
}

#[test]
fn double_backward_matches_finite_differences_on_random_nets() {
    for seed in 0..10 {
        let (params, input) = random_net_point(100 + seed);
        let check = check_gradient(
            |g, p| {
                let f = two_layer_net(g, p, &input);
                let grads = g.grad(f, p).unwrap();
                let mut total = None;
                for gr in grads {
                    let sq = g.square(gr);
                    let s = g.sum(sq);
                    total = Some(match total {
                        Some(t) => g.add(t, s),
                        None => s,
                    });
                }
                total.unwrap()
            },
            &params,
            1e-5,
        );
        assert!(check.max_rel_error < 1e-3, "seed {seed}: {check:?}");
    }
}

type Program = fn(&mut Graph, &[Var]) -> Var;
type Case = (&'static str, Vec<(usize, usize)>, (f64, f64), Program);

/// One entry per primitive: name, input shapes, sampling range, program.
fn primitive_programs() -> Vec<Case> {
    vec![
        ("matmul", vec![(2, 3), (3, 2)], (-1.0, 1.0), |g, v| g.matmul(v[0], v[1])),
        ("matmul_ta", vec![(3, 2), (3, 4)], (-1.0, 1.0), |g, v| g.matmul_t(v[0], v[1], true, false)),
        ("matmul_tb", vec![(2, 3), (4, 3)], (-1.0, 1.0), |g, v| g.matmul_t(v[0], v[1], false, true)),
        ("matmul_tatb", vec![(3, 2), (4, 3)], (-1.0, 1.0), |g, v| g.matmul_t(v[0], v[1], true, true)),
        ("add", vec![(2, 3), (2, 3)], (-1.0, 1.0), |g, v| g.add(v[0], v[1])),
        ("add_row_broadcast", vec![(3, 4), (1, 4)], (-1.0, 1.0), |g, v| g.add(v[0], v[1])),
        ("add_col_broadcast", vec![(3, 4), (3, 1)], (-1.0, 1.0), |g, v| g.add(v[0], v[1])),
        ("sub_scalar_broadcast", vec![(1, 1), (2, 3)], (-1.0, 1.0), |g, v| g.sub(v[0], v[1])),
        ("mul", vec![(2, 3), (2, 3)], (-1.0, 1.0), |g, v| g.mul(v[0], v[1])),
        ("mul_row_broadcast", vec![(1, 3), (4, 3)], (-1.0, 1.0), |g, v| g.mul(v[0], v[1])),
        ("scale", vec![(2, 3)], (-1.0, 1.0), |g, v| g.scale(v[0], -2.5)),
        ("tanh", vec![(2, 3)], (-2.0, 2.0), |g, v| g.tanh(v[0])),
        ("exp", vec![(2, 3)], (-2.0, 2.0), |g, v| g.exp(v[0])),
        ("log", vec![(2, 3)], (0.2, 3.0), |g, v| g.log(v[0])),
        ("square", vec![(2, 3)], (-2.0, 2.0), |g, v| g.square(v[0])),
        ("clip", vec![(2, 3)], (0.05, 0.95), |g, v| g.clip(v[0], 0.0, 1.0)),
        ("sum", vec![(2, 3)], (-1.0, 1.0), |g, v| g.sum(v[0])),
        ("sum_over_rows", vec![(3, 2)], (-1.0, 1.0), |g, v| g.sum_over(v[0], Reduce::OverRows)),
        ("sum_over_cols", vec![(3, 2)], (-1.0, 1.0), |g, v| g.sum_over(v[0], Reduce::OverCols)),
        ("concat", vec![(2, 2), (2, 3)], (-1.0, 1.0), |g, v| g.concat(&[v[0], v[1]])),
        ("slice", vec![(2, 5)], (-1.0, 1.0), |g, v| g.slice_cols(v[0], 1, 3)),
        ("transpose", vec![(2, 3)], (-1.0, 1.0), |g, v| g.transpose(v[0])),
        ("logsumexp", vec![(3, 4)], (-2.0, 2.0), |g, v| g.logsumexp(v[0])),
        ("dropout", vec![(2, 3)], (-1.0, 1.0), |g, v| {
            let m = g.constant(Tensor::new(2, 3, vec![2.0, 0.0, 2.0, 2.0, 2.0, 0.0]));
            g.dropout(v[0], m)
        }),
        ("gather_rows", vec![(3, 2)], (-1.0, 1.0), |g, v| g.gather_rows(v[0], &[2, 0, 2])),
        ("scatter_rows", vec![(3, 2)], (-1.0, 1.0), |g, v| g.scatter_rows(v[0], &[1, 1, 3], 4)),
        ("normal_cdf", vec![(2, 3)], (-2.0, 2.0), |g, v| g.normal_cdf(v[0])),
    ]
}

#[test]
fn every_primitive_vjp_matches_finite_differences() {
    for (name, shapes, (lo, hi), program) in primitive_programs() {
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(trial * 7919 + name.len() as u64);
            let point: Vec<Tensor> = shapes
                .iter()
                .map(|&(r, c)| random_tensor(&mut rng, r, c, lo, hi))
                .collect();
            let check = check_gradient(
                |g, v| {
                    let y = program(g, v);
                    project(g, y, trial)
                },
                &point,
                1e-6,
            );
            assert!(
                check.max_rel_error < 1e-4,
                "{name} trial {trial}: {check:?}"
            );
        }
    }
}

#[test]
fn every_primitive_second_order_matches_finite_differences() {
    // gradient of the squared first-order gradient norm, per primitive
    for (name, shapes, (lo, hi), program) in primitive_programs() {
        for trial in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(trial + 31);
            let point: Vec<Tensor> = shapes
                .iter()
                .map(|&(r, c)| random_tensor(&mut rng, r, c, lo, hi))
                .collect();
            let check = check_gradient(
                |g, v| {
                    let y = program(g, v);
                    let y = g.tanh(y);
                    let s = project(g, y, trial);
                    let grads = g.grad(s, v).unwrap();
                    let mut total = g.scalar_constant(0.0);
                    for gr in grads {
                        let sq = g.square(gr);
                        let s = g.sum(sq);
                        total = g.add(total, s);
                    }
                    total
                },
                &point,
                1e-5,
            );
            assert!(check.max_rel_error < 1e-3, "{name} trial {trial}: {check:?}");
        }
    }
}

#[test]
fn evaluation_is_bit_identical_and_replayable() {
    let (params, input) = random_net_point(3);
    let run = || {
        let mut g = Graph::new();
        let p: Vec<Var> = params.iter().map(|t| g.leaf(t.clone())).collect();
        let f = two_layer_net(&mut g, &p, &input);
        let grads = g.grad_vector(f, &p).unwrap();
        (g, p, f, grads)
    };
    let (g1, p1, f1, grads1) = run();
    let (_, _, f2, grads2) = run();
    assert_eq!(f1, f2);
    assert_eq!(grads1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), grads2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert!(g1.is_topologically_ordered());

    let replayed = g1.replay(&[]);
    for (i, v) in replayed.iter().enumerate() {
        assert_eq!(v, g1.value(Var(i)), "node {i}");
    }

    // overriding a leaf changes downstream values
    let mut shifted = params[1].clone();
    shifted.data_mut()[0] += 0.25;
    let replayed = g1.replay(&[(p1[1], shifted)]);
    assert_ne!(replayed[f1.index()], *g1.value(f1));
}

#[test]
fn backward_rejects_non_scalar_output() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::row(vec![1.0, 2.0]));
    let y = g.square(x);
    assert_eq!(
        g.grad(y, &[x]),
        Err(AutodiffError::NonScalarOutput { shape: (1, 2) })
    );
}

#[test]
#[should_panic(expected = "shape mismatch")]
fn shape_mismatch_panics() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(2, 3));
    let b = g.constant(Tensor::zeros(2, 3));
    g.matmul(a, b);
}

#[test]
fn log_is_floored() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::row(vec![0.0, -1.0, 1.0]));
    let y = g.log(x);
    let v = g.value(y).data().to_vec();
    assert_eq!(v[0], 1e-12f64.ln());
    assert_eq!(v[1], 1e-12f64.ln());
    assert_eq!(v[2], 0.0);
    let s = g.sum(y);
    let grad = g.grad_vector(s, &[x]).unwrap();
    assert_eq!(grad, vec![0.0, 0.0, 1.0]);
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::row(vec![1.0, 2.0]));
    let unused = g.leaf(Tensor::zeros(2, 2));
    let s = g.sum(x);
    let grads = g.grad(s, &[x, unused]).unwrap();
    assert_eq!(g.value(grads[1]), &Tensor::zeros(2, 2));
}

#[test]
fn param_store_ranges_align_with_gradients() {
    let mut store = ParamStore::new();
    store.push("a", Tensor::row(vec![1.0, 2.0]));
    store.push("b", Tensor::scalar(3.0));
    assert_eq!(store.num_params(), 3);
    assert_eq!(store.range_of("b"), Some(2..3));
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    let sq = g.square(vars[1]);
    let b2 = g.sum(sq);
    let sa = g.sum(vars[0]);
    let total = g.add(sa, b2);
    let grad = g.grad_vector(total, &vars).unwrap();
    assert_eq!(grad, vec![1.0, 1.0, 6.0]);
    assert!(store.unflatten(&[0.0]).is_err());
}

proptest! {
    #[test]
    fn flatten_unflatten_roundtrip(values in proptest::collection::vec(-1e6f64..1e6, 7)) {
        let mut store = ParamStore::new();
        store.push("w", Tensor::zeros(2, 3));
        store.push("b", Tensor::zeros(1, 1));
        store.unflatten(&values).unwrap();
        prop_assert_eq!(store.flatten(), values.clone());
        let mut copy = store.clone();
        copy.unflatten(&store.flatten()).unwrap();
        prop_assert_eq!(copy, store);
    }

    #[test]
    fn primitive_outputs_finite_on_finite_inputs(vals in proptest::collection::vec(-50.0f64..50.0, 6)) {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(2, 3, vals));
        let outs = [
            g.tanh(x), g.exp(x), g.log(x), g.square(x), g.clip(x, 0.0, 1.0),
            g.logsumexp(x), g.normal_cdf(x), g.softmax(x),
        ];
        for o in outs {
            prop_assert!(g.value(o).is_finite());
        }
    }
}
