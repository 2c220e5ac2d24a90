mod common;

use choose::model::ChainMode;
use choose::tensor::{gelu, grad_check, numeric_gradient, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn random(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).unwrap()
}

fn grads_of(tape: &Tape<f64>, loss: choose::tensor::Var, vars: &[choose::tensor::Var]) -> (f64, Vec<Vec<f64>>) {
    let value = tape.value(loss)[0];
    let mut g = tape.backward(loss).unwrap();
    let gs = vars.iter().map(|&v| g.take(v).unwrap_or_else(|| vec![0.0; tape.value(v).len()])).collect();
    (value, gs)
}

#[test]
fn sum_of_product_matches_finite_differences() {
    let mut rng = choose::rng::Streams::new(1).stream(choose::rng::Purpose::Test, 0);
    let inputs = vec![random(&mut rng, &[3, 4], 1.0), random(&mut rng, &[4, 5], 1.0)];
    let f = |xs: &[Tensor<f64>]| {
        let tape = Tape::new();
        let a = tape.param(xs[0].clone());
        let b = tape.param(xs[1].clone());
        let p = tape.matmul(a, b).unwrap();
        let loss = tape.sum(p);
        grads_of(&tape, loss, &[a, b])
    };
    let (_, analytic) = f(&inputs);
    let numeric = numeric_gradient(&mut |xs: &[Tensor<f64>]| f(xs).0, &inputs, 1e-5);
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!(common::max_abs_diff(a, n) < 1e-8);
    }
}

#[test]
fn linear_map_is_exact() {
    let mut rng = choose::rng::Streams::new(2).stream(choose::rng::Purpose::Test, 0);
    let inputs = vec![random(&mut rng, &[1, 6], 1.0), random(&mut rng, &[6, 1], 1.0)];
    let err = grad_check(
        &mut |xs: &[Tensor<f64>]| {
            let tape = Tape::new();
            let w = tape.param(xs[0].clone());
            let x = tape.param(xs[1].clone());
            let y = tape.matmul(w, x).unwrap();
            let loss = tape.sum(y);
            grads_of(&tape, loss, &[w, x])
        },
        &inputs,
    );
    assert!(err <= 1e-9, "{err}");
}

#[test]
fn two_layer_gelu_mlp() {
    let mut rng = choose::rng::Streams::new(3).stream(choose::rng::Purpose::Test, 0);
    let inputs = vec![
        random(&mut rng, &[5, 4], 1.0),
        random(&mut rng, &[4, 8], 0.5),
        random(&mut rng, &[8], 0.5),
        random(&mut rng, &[8, 3], 0.5),
        random(&mut rng, &[3], 0.5),
    ];
    let err = grad_check(
        &mut |xs: &[Tensor<f64>]| {
            let tape = Tape::new();
            let v: Vec<_> = xs.iter().map(|t| tape.param(t.clone())).collect();
            let h = tape.add_bias(tape.matmul(v[0], v[1]).unwrap(), v[2]).unwrap();
            let h = tape.gelu(h);
            let o = tape.add_bias(tape.matmul(h, v[3]).unwrap(), v[4]).unwrap();
            let loss = tape.sum_squares(o).unwrap();
            grads_of(&tape, loss, &v)
        },
        &inputs,
    );
    assert!(err <= 1e-4, "{err}");
    assert!((gelu(10.0f64) - 10.0).abs() < 1e-4);
}

#[test]
fn one_layer_choose_end_to_end() {
    let p = common::params::<f64>(1, 4, 0.1, 4);
    let blocks = common::blocks(16, 20.0, 2, common::T, 4);
    let err = common::choose_grad_error(&p, &blocks, 4, ChainMode::Masked);
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn two_layer_unrolled_chain() {
    let p = common::params::<f64>(2, 3, 0.1, 5);
    let blocks = common::blocks(16, 20.0, 1, 4, 5);
    let err = common::choose_grad_error(&p, &blocks, 3, ChainMode::Unrolled);
    assert!(err <= 1e-4, "{err}");
}

/// Composition of every primitive: projections, layer norm, GELU,
/// multi-head masked attention, concatenation, row gathers and reshapes.
fn composed_graph(xs: &[Tensor<f64>], batch: usize, seq: usize, heads: usize) -> (f64, Vec<Vec<f64>>) {
    let tape = Tape::new();
    let v: Vec<_> = xs.iter().map(|t| tape.param(t.clone())).collect();
    let (x, gain, bias, wq, wk, wv, extra) = (v[0], v[1], v[2], v[3], v[4], v[5], v[6]);
    let d = tape.shape(x)[1];
    let n = tape.layer_norm(x, gain, bias).unwrap();
    let q = tape.split_heads(tape.matmul(n, wq).unwrap(), batch, seq, heads).unwrap();
    let k = tape.split_heads(tape.matmul(n, wk).unwrap(), batch, seq, heads).unwrap();
    let val = tape.split_heads(tape.gelu(tape.matmul(n, wv).unwrap()), batch, seq, heads).unwrap();
    let mut m = vec![f64::NEG_INFINITY; seq * seq];
    for r in 0..seq {
        for c in 0..=r {
            m[r * seq + c] = 0.0;
        }
    }
    let mask = tape.constant(Tensor::new(&[seq, seq], m).unwrap());
    let s = tape.scale(tape.batch_matmul(q, k, true).unwrap(), 0.7);
    let a = tape.masked_softmax(s, mask).unwrap();
    let o = tape.merge_heads(tape.batch_matmul(a, val, false).unwrap(), batch, heads).unwrap();
    let o = tape.add(o, x).unwrap();
    let o3 = tape.reshape(o, &[batch, seq, d]).unwrap();
    let e3 = tape.reshape(extra, &[batch, 1, d]).unwrap();
    let cat = tape.concat(&[o3, e3]).unwrap();
    let flat = tape.reshape(cat, &[batch * (seq + 1), d]).unwrap();
    let rows: Vec<usize> = (0..batch * (seq + 1)).rev().step_by(2).collect();
    let picked = tape.gather_rows(flat, &rows).unwrap();
    let prod = tape.mul(picked, tape.sub(picked, tape.gelu(picked)).unwrap()).unwrap();
    let loss = tape.sum(prod);
    grads_of(&tape, loss, &v)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]
    #[test]
    fn composed_graphs_match_finite_differences(seed in any::<u64>(), batch in 1usize..3, seq in 1usize..5, heads in 1usize..3) {
        let mut rng = choose::rng::Streams::new(seed).stream(choose::rng::Purpose::Test, 0);
        let d = 4 * heads;
        let inputs = vec![
            random(&mut rng, &[batch * seq, d], 1.0),
            random(&mut rng, &[d], 1.0),
            random(&mut rng, &[d], 0.5),
            random(&mut rng, &[d, d], 0.7),
            random(&mut rng, &[d, d], 0.7),
            random(&mut rng, &[d, d], 0.7),
            random(&mut rng, &[batch, d], 1.0),
        ];
        let err = grad_check(&mut |xs: &[Tensor<f64>]| composed_graph(xs, batch, seq, heads), &inputs);
        prop_assert!(err <= 1e-4, "relative error {}", err);
    }
}
