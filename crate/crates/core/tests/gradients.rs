//! Reverse-mode gradients against central finite differences, per op and
//! for the full adapter losses.

mod common;

use std::sync::Arc;

use common::{adapter, all_coords, base, fd_rel_err, pairs, rng, small_adapter, small_dims};
use corsa::losses::UpdateData;
use corsa::tensor::ParamLayout;
use corsa::{OpKind, ParamVector, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-6;
const TOL: f64 = 1e-4;

type Build = for<'t> fn(&'t Tape, &[Var<'t>]) -> corsa::error::Result<Var<'t>>;

fn random_tensor(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Reduces the op output to a scalar with a fixed random weighting, so the
/// whole vector-Jacobian product is exercised.
fn scalarize<'t>(tape: &'t Tape, out: Var<'t>, weights: &Tensor) -> Var<'t> {
    if out.shape().iter().product::<usize>() == 1 {
        return tape.scale(out, weights.data()[0]).unwrap();
    }
    let w = tape.constant(weights.clone().reshaped(out.shape()).unwrap());
    tape.sum(tape.mul(out, w).unwrap()).unwrap()
}

fn check_op(inputs: Vec<Tensor>, build: Build, seed: u64) -> f64 {
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("x{i}")).collect();
    let layout = Arc::new(ParamLayout::new(names.iter().zip(&inputs).map(|(n, t)| (n.clone(), t.shape().to_vec()))).unwrap());
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let at = ParamVector::from_values(layout, flat).unwrap();

    let probe = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let out_len: usize = build(&probe, &vars).unwrap().shape().iter().product();
    let weights = random_tensor(&mut rng(seed ^ 0xfeed), &[out_len], -1.0, 1.0);

    let eval = |p: &ParamVector, with_grad: bool| -> (f64, Option<ParamVector>) {
        let tape = Tape::new();
        let vars: Vec<Var> = names.iter().map(|n| tape.param(n, p.tensor(n).unwrap()).unwrap()).collect();
        let loss = scalarize(&tape, build(&tape, &vars).unwrap(), &weights);
        let v = loss.item().unwrap();
        (v, with_grad.then(|| tape.grad(loss, &vars).unwrap()))
    };
    let grad = eval(&at, true).1.unwrap();
    fd_rel_err(|p| eval(p, false).0, &grad, &at, &all_coords(&at), H, FLOOR)
}

fn dims(seed: u64) -> (usize, usize, usize) {
    let mut r = rng(seed);
    (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5))
}

fn unary(seed: u64, lo: f64, hi: f64, build: Build) -> f64 {
    let (m, n, _) = dims(seed);
    let mut r = rng(seed);
    check_op(vec![random_tensor(&mut r, &[m, n], lo, hi)], build, seed)
}

fn binary(seed: u64, build: Build) -> f64 {
    let (m, n, _) = dims(seed);
    let mut r = rng(seed);
    check_op(vec![random_tensor(&mut r, &[m, n], -2.0, 2.0), random_tensor(&mut r, &[m, n], -2.0, 2.0)], build, seed)
}

fn matmul(seed: u64, trans_a: bool, trans_b: bool) -> f64 {
    let (m, k, n) = dims(seed);
    let mut r = rng(seed);
    let a = if trans_a { [k, m] } else { [m, k] };
    let b = if trans_b { [n, k] } else { [k, n] };
    let build: Build = match (trans_a, trans_b) {
        (false, false) => |t, v| t.apply(OpKind::MatMul { trans_a: false, trans_b: false }, &[v[0], v[1]]),
        (false, true) => |t, v| t.apply(OpKind::MatMul { trans_a: false, trans_b: true }, &[v[0], v[1]]),
        (true, false) => |t, v| t.apply(OpKind::MatMul { trans_a: true, trans_b: false }, &[v[0], v[1]]),
        (true, true) => |t, v| t.apply(OpKind::MatMul { trans_a: true, trans_b: true }, &[v[0], v[1]]),
    };
    check_op(vec![random_tensor(&mut r, &a, -1.0, 1.0), random_tensor(&mut r, &b, -1.0, 1.0)], build, seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_all_transposes(seed in any::<u64>()) {
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            prop_assert!(matmul(seed, ta, tb) < TOL);
        }
    }

    #[test]
    fn elementwise_binary(seed in any::<u64>()) {
        prop_assert!(binary(seed, |t, v| t.add(v[0], v[1])) < TOL);
        prop_assert!(binary(seed, |t, v| t.mul(v[0], v[1])) < TOL);
        prop_assert!(binary(seed, |t, v| t.mul(v[0], v[0])) < TOL);
    }

    #[test]
    fn elementwise_unary(seed in any::<u64>()) {
        prop_assert!(unary(seed, -3.0, 3.0, |t, v| t.scale(v[0], -1.7)) < TOL);
        prop_assert!(unary(seed, -3.0, 3.0, |t, v| t.sigmoid(v[0])) < TOL);
        prop_assert!(unary(seed, -8.0, 8.0, |t, v| t.log_sigmoid(v[0])) < TOL);
        prop_assert!(unary(seed, -3.0, 3.0, |t, v| t.tanh(v[0])) < TOL);
        prop_assert!(unary(seed, 0.2, 4.0, |t, v| t.log(v[0])) < TOL);
        prop_assert!(unary(seed, -3.0, 3.0, |t, v| t.neg(v[0])) < TOL);
    }

    #[test]
    fn reductions_and_softmax(seed in any::<u64>()) {
        prop_assert!(unary(seed, -3.0, 3.0, |t, v| t.sum(v[0])) < TOL);
        prop_assert!(unary(seed, -3.0, 3.0, |t, v| t.mean(v[0])) < TOL);
        prop_assert!(unary(seed, -5.0, 5.0, |t, v| t.log_softmax(v[0])) < TOL);
    }

    #[test]
    fn gather_with_repeats(seed in any::<u64>()) {
        let (m, n, _) = dims(seed);
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[m.max(2), n], -2.0, 2.0);
        // Fixed row pattern with a repeated and a skipped row.
        prop_assert!(check_op(vec![x], |t, v| t.gather_rows(v[0], vec![1, 0, 1]), seed) < TOL);
    }

    #[test]
    fn concat_both_axes(seed in any::<u64>()) {
        let (m, n, k) = dims(seed);
        let mut r = rng(seed);
        let rows = vec![random_tensor(&mut r, &[m, n], -2.0, 2.0), random_tensor(&mut r, &[k, n], -2.0, 2.0)];
        prop_assert!(check_op(rows, |t, v| t.concat(&[v[0], v[1]], 0), seed) < TOL);
        let cols = vec![random_tensor(&mut r, &[m, n], -2.0, 2.0), random_tensor(&mut r, &[m, k], -2.0, 2.0)];
        prop_assert!(check_op(cols, |t, v| t.concat(&[v[0], v[1], v[0]], 1), seed) < TOL);
    }

    #[test]
    fn composite_graph(seed in any::<u64>()) {
        let mut r = rng(seed);
        let inputs = vec![random_tensor(&mut r, &[3, 4], -1.0, 1.0), random_tensor(&mut r, &[4, 5], -1.0, 1.0)];
        let build: Build = |t, v| {
            let h = t.tanh(t.matmul(v[0], v[1])?)?;
            let lp = t.log_softmax(t.concat(&[h, t.neg(h)?], 1)?)?;
            t.mean(t.gather_rows(lp, vec![2, 0])?)
        };
        prop_assert!(check_op(inputs, build, seed) < TOL);
    }
}

fn loss_setup(seed: u64) -> (corsa::model::BaseParams, corsa::model::AdapterState, UpdateData) {
    let dims = small_dims();
    let b = base(dims, seed);
    let a = adapter(dims, small_adapter(), seed ^ 1, 0.5);
    let new = pairs(dims, 4, seed ^ 2);
    let ps = pairs(dims, 3, seed ^ 3);
    let data = UpdateData::new(&b, &new, &ps, None).unwrap();
    (b, a, data)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn sft_dpo_update_and_margin_gradients(seed in any::<u64>()) {
        let (b, a, data) = loss_setup(seed);
        let new_idx = [0, 1, 2, 3];
        let pair_idx = [0, 1, 2];
        let phi = a.params().clone();
        let at = |p: &ParamVector| a.with_params(p.clone()).unwrap();
        let coords = all_coords(&phi);

        let g = data.sft(&b, &a, &new_idx).unwrap().grad;
        prop_assert!(fd_rel_err(|p| data.sft_value(&b, &at(p), &new_idx).unwrap(), &g, &phi, &coords, H, FLOOR) < TOL);

        let g = data.dpo(&b, &a, &pair_idx, 0.7).unwrap().grad;
        prop_assert!(fd_rel_err(|p| data.dpo_value(&b, &at(p), &pair_idx, 0.7).unwrap(), &g, &phi, &coords, H, FLOOR) < TOL);

        let (_, g) = data.update(&b, &a, &new_idx, &pair_idx, 0.6, 0.7).unwrap();
        let f = |p: &ParamVector| data.update(&b, &at(p), &new_idx, &pair_idx, 0.6, 0.7).unwrap().0.combined;
        prop_assert!(fd_rel_err(f, &g, &phi, &coords, H, FLOOR) < TOL);

        let pair = &pairs(small_dims(), 1, seed ^ 4)[0];
        let g = corsa::losses::margin_with_grad(&b, &a, pair).unwrap().grad;
        prop_assert!(fd_rel_err(|p| corsa::losses::margin(&b, Some(&at(p)), pair).unwrap(), &g, &phi, &coords, H, FLOOR) < TOL);
    }
}

#[test]
fn default_dims_sampled_coordinates() {
    let dims = corsa::model::ModelDims::default();
    for seed in 0..20u64 {
        let b = base(dims, seed);
        let a = adapter(dims, Default::default(), seed ^ 1, 0.05);
        let data = UpdateData::new(&b, &pairs(dims, 3, seed ^ 2), &pairs(dims, 3, seed ^ 3), None).unwrap();
        let (_, g) = data.update(&b, &a, &[0, 1, 2], &[0, 1, 2], 1.0, 0.1).unwrap();
        let mut r = rng(seed);
        let coords: Vec<usize> = (0..48).map(|_| r.gen_range(0..g.len())).collect();
        let f = |p: &ParamVector| data.update(&b, &a.with_params(p.clone()).unwrap(), &[0, 1, 2], &[0, 1, 2], 1.0, 0.1).unwrap().0.combined;
        let err = fd_rel_err(f, &g, a.params(), &coords, H, FLOOR);
        assert!(err < TOL, "seed {seed}: {err}");
    }
}
