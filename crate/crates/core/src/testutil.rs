//! Central finite-difference oracle shared by the unit tests.

use crate::tensor::rng;
use crate::{Result, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`.
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

/// Worst relative error between tape gradients and central differences of
/// the scalar built by `f`, over every input tensor.
pub fn grad_check(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).item()
    };
    let mut worst = 0.0f64;
    for (which, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= FD_STEP;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic[which], &numeric));
    }
    worst
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng::seeded(seed))
}
