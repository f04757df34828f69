#![allow(dead_code)]

use m2m_core::{Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients that are zero up
/// to rounding compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Fixed, non-symmetric weights that turn any output into a scalar loss.
fn probe(len: usize) -> Tensor {
    Tensor::new(&[len], (0..len).map(|i| ((i as f64 + 1.0) * 0.7).sin() + 0.3).collect()).unwrap()
}

fn scalar(out: &Var) -> Result<Var> {
    if out.value().len() == 1 {
        return out.reshape(&[1]);
    }
    let flat = out.reshape(&[out.value().len()])?;
    flat.mul(&Var::constant(probe(out.value().len())))?.sum().reshape(&[1])
}

/// Largest relative error between backprop and central differences of
/// Σ probe ⊙ f(inputs), over every entry of every input.
pub fn grad_check(inputs: &[Tensor], f: impl Fn(&[Var]) -> Result<Var>) -> f64 {
    grad_check_with_step(inputs, FD_STEP, f)
}

/// As [`grad_check`] with step `h`. Round-off in the difference grows like
/// ε·|loss|/h, so deep compositions with sub-1e-6 gradient entries need a
/// larger step than [`FD_STEP`] to be resolved.
pub fn grad_check_with_step(inputs: &[Tensor], h: f64, f: impl Fn(&[Var]) -> Result<Var>) -> f64 {
    let vars: Vec<Var> = inputs.iter().cloned().map(Var::param).collect();
    let loss = scalar(&f(&vars).unwrap()).unwrap();
    loss.backward().unwrap();
    let eval = |ins: &[Tensor]| -> f64 {
        let consts: Vec<Var> = ins.iter().cloned().map(Var::constant).collect();
        scalar(&f(&consts).unwrap()).unwrap().value().data()[0]
    };
    let mut worst: f64 = 0.0;
    for (v, var) in vars.iter().enumerate() {
        let analytic = var.grad().unwrap_or_else(|| Tensor::zeros(var.shape()));
        for e in 0..inputs[v].len() {
            let mut plus = inputs.to_vec();
            plus[v].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[v].data_mut()[e] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[e], numeric));
        }
    }
    worst
}
