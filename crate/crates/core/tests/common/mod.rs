//! Central finite-difference oracles for the integration suites.

#![allow(dead_code)]

use nova_core::tensor::rng;
use nova_core::{ParamStore, Result, Tape, Tensor, Var};
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the plain distance when both are ~0.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn central(f: impl Fn(f64) -> f64) -> f64 {
    (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP)
}

/// Worst relative error, over input tensors, between tape gradients of the
/// scalar built by `f` and central differences.
pub fn grad_check(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).item()
    };
    let mut worst = 0.0f64;
    for (which, t) in inputs.iter().enumerate() {
        let numeric: Vec<f64> = (0..t.numel())
            .map(|i| {
                central(|e| {
                    let mut xs = inputs.to_vec();
                    xs[which].data_mut()[i] += e;
                    eval(&xs)
                })
            })
            .collect();
        worst = worst.max(rel_err(&analytic[which], &numeric));
    }
    worst
}

/// Compares `grads` (one slot per parameter) against central differences of
/// `loss` on `per_tensor` random entries of every parameter. Returns the
/// relative error over all checked entries together and the worst single
/// tensor with its name.
pub fn param_check(
    store: &ParamStore<f64>,
    grads: &[Option<Tensor<f64>>],
    per_tensor: usize,
    seed: u64,
    loss: impl Fn(&ParamStore<f64>) -> f64,
) -> (f64, f64, String) {
    let mut pick = rng::seeded(seed);
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    let (mut worst, mut worst_name) = (0.0f64, String::new());
    for id in store.ids() {
        let n = store.get(id).numel();
        let idx: Vec<usize> = (0..per_tensor.min(n)).map(|_| pick.random_range(0..n)).collect();
        let a: Vec<f64> = idx
            .iter()
            .map(|&i| grads[id.index()].as_ref().map_or(0.0, |g| g.data()[i]))
            .collect();
        let num: Vec<f64> = idx
            .iter()
            .map(|&i| {
                central(|e| {
                    let mut s = store.clone();
                    s.get_mut(id).data_mut()[i] += e;
                    loss(&s)
                })
            })
            .collect();
        let e = rel_err(&a, &num);
        if e > worst {
            worst = e;
            worst_name = store.name(id).to_string();
        }
        all_a.extend(a);
        all_n.extend(num);
    }
    (rel_err(&all_a, &all_n), worst, worst_name)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng::seeded(seed))
}
