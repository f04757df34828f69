//! Backprop against central differences for every differentiable op.

mod common;

use std::rc::Rc;

use common::{grad_check, randn, rng, GRAD_TOL};
use m2m_core::{Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

fn cases() -> ProptestConfig {
    ProptestConfig::with_cases(128)
}

/// Random entries kept at least `gap` away from zero so kinks and poles are
/// never within a finite-difference step.
fn away_from_zero(shape: &[usize], seed: u64, gap: f64) -> Tensor {
    randn(shape, seed).map(|v| if v.abs() >= gap { v } else if v < 0.0 { -2.0 * gap } else { 2.0 * gap })
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    randn(shape, seed).map(|v| v.abs() + 0.5)
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..4, 1..4)
}

/// Shape `b` that broadcasts against `a`: each axis kept or set to 1.
fn broadcast_partner(a: &[usize], mask: u8) -> Vec<usize> {
    a.iter().enumerate().map(|(i, &d)| if mask >> i & 1 == 1 { 1 } else { d }).collect()
}

#[test]
fn checker_catches_a_missing_path() {
    // d/dx (x · stop_grad(x)) is x under backprop but 2x numerically.
    let x = [randn(&[3], 11)];
    let err = grad_check(&x, |v| v[0].mul(&Var::constant(v[0].value().clone())));
    assert!(err > 0.4, "checker missed a wrong gradient: {err}");
}

proptest! {
    #![proptest_config(cases())]

    #[test]
    fn add_sub_broadcast(shape in shape_strategy(), mask in 0u8..8, seed in any::<u64>()) {
        let b = broadcast_partner(&shape, mask);
        let ins = [randn(&shape, seed), randn(&b, seed ^ 1)];
        prop_assert!(grad_check(&ins, |v| v[0].add(&v[1])) <= GRAD_TOL);
        prop_assert!(grad_check(&ins, |v| v[1].sub(&v[0])) <= GRAD_TOL);
    }

    #[test]
    fn mul_div_broadcast(shape in shape_strategy(), mask in 0u8..8, seed in any::<u64>()) {
        let b = broadcast_partner(&shape, mask);
        let ins = [randn(&shape, seed), randn(&b, seed ^ 1)];
        prop_assert!(grad_check(&ins, |v| v[0].mul(&v[1])) <= GRAD_TOL);
        let den = [randn(&shape, seed), positive(&b, seed ^ 2)];
        prop_assert!(grad_check(&den, |v| v[0].div(&v[1])) <= GRAD_TOL);
    }

    #[test]
    fn unary_ops(shape in shape_strategy(), seed in any::<u64>(), c in -3.0f64..3.0) {
        let x = [away_from_zero(&shape, seed, 1e-3)];
        prop_assert!(grad_check(&x, |v| Ok(v[0].relu())) <= GRAD_TOL);
        prop_assert!(grad_check(&x, |v| Ok(v[0].exp())) <= GRAD_TOL);
        prop_assert!(grad_check(&x, |v| Ok(v[0].gelu())) <= GRAD_TOL);
        prop_assert!(grad_check(&x, |v| Ok(v[0].scale(c))) <= GRAD_TOL);
        prop_assert!(grad_check(&[positive(&shape, seed)], |v| Ok(v[0].sqrt())) <= GRAD_TOL);
    }

    #[test]
    fn matmul_and_transpose(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let ins = [randn(&[m, k], seed), randn(&[k, n], seed ^ 1)];
        prop_assert!(grad_check(&ins, |v| v[0].matmul(&v[1])) <= GRAD_TOL);
        prop_assert!(grad_check(&ins[..1], |v| v[0].transpose()) <= GRAD_TOL);
    }

    #[test]
    fn reductions(shape in shape_strategy(), seed in any::<u64>(), axis_pick in 0usize..3) {
        let x = [randn(&shape, seed)];
        let axis = axis_pick % shape.len();
        prop_assert!(grad_check(&x, |v| Ok(v[0].sum())) <= GRAD_TOL);
        prop_assert!(grad_check(&x, |v| Ok(v[0].mean())) <= GRAD_TOL);
        prop_assert!(grad_check(&x, |v| v[0].sum_axis(axis)) <= GRAD_TOL);
    }

    #[test]
    fn reshape_concat_narrow(shape in shape_strategy(), seed in any::<u64>(), axis_pick in 0usize..3, extra in 1usize..3) {
        let axis = axis_pick % shape.len();
        let mut other = shape.clone();
        other[axis] = extra;
        let ins = [randn(&shape, seed), randn(&other, seed ^ 1)];
        let total: usize = shape.iter().product();
        prop_assert!(grad_check(&ins[..1], |v| v[0].reshape(&[total])) <= GRAD_TOL);
        prop_assert!(grad_check(&ins, |v| Var::concat(&[v[0].clone(), v[1].clone()], axis)) <= GRAD_TOL);
        let start = shape[axis] / 2;
        let len = shape[axis] - start;
        prop_assert!(grad_check(&ins[..1], |v| v[0].narrow(axis, start, len)) <= GRAD_TOL);
    }

    #[test]
    fn softmax_any_axis(shape in shape_strategy(), seed in any::<u64>(), axis_pick in 0usize..3) {
        let axis = axis_pick % shape.len();
        prop_assert!(grad_check(&[randn(&shape, seed).scale(2.0)], |v| v[0].softmax(axis)) <= GRAD_TOL);
    }

    #[test]
    fn layer_norm_all_inputs(t in 1usize..4, d in 2usize..6, seed in any::<u64>()) {
        let ins = [randn(&[t, d], seed), randn(&[d], seed ^ 1), randn(&[d], seed ^ 2)];
        prop_assert!(grad_check(&ins, |v| v[0].layer_norm(&v[1], &v[2], 1e-5)) <= GRAD_TOL);
    }

    #[test]
    fn normalize_rows(t in 1usize..4, d in 1usize..6, seed in any::<u64>()) {
        prop_assert!(grad_check(&[randn(&[t, d], seed)], |v| v[0].normalize_rows(1e-12)) <= GRAD_TOL);
    }

    #[test]
    fn bilinear_resize_separable(h in 1usize..4, w in 1usize..4, oh in 1usize..6, ow in 1usize..6, seed in any::<u64>()) {
        let x = [randn(&[2, h, w], seed)];
        prop_assert!(grad_check(&x, |v| v[0].bilinear_resize(&[1, 2], &[oh, ow])) <= GRAD_TOL);
    }

    #[test]
    fn rotate_pairs(t in 1usize..4, half in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed ^ 7);
        let angles: Vec<f64> = (0..t * half).map(|_| r.gen_range(-3.0..3.0)).collect();
        let cos: Rc<[f64]> = angles.iter().map(|a| a.cos()).collect();
        let sin: Rc<[f64]> = angles.iter().map(|a| a.sin()).collect();
        prop_assert!(grad_check(&[randn(&[t, 2 * half], seed)], |v| v[0].rotate_pairs(cos.clone(), sin.clone())) <= GRAD_TOL);
    }
}
