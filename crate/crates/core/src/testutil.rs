//! Shared helpers for unit tests: random tensors and a central-difference
//! gradient oracle that is independent of the tape's backward rules.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-5;

pub fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.range(-1.0, 1.0))
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn eval_scalar<F>(inputs: &[Tensor], f: &F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    tape.value(out).item()
}

pub fn numeric_gradient<F>(inputs: &[Tensor], which: usize, f: &F) -> Vec<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work = inputs.to_vec();
    (0..inputs[which].numel())
        .map(|i| {
            let orig = inputs[which].data()[i];
            work[which].data_mut()[i] = orig + FD_STEP;
            let up = eval_scalar(&work, f);
            work[which].data_mut()[i] = orig - FD_STEP;
            let down = eval_scalar(&work, f);
            work[which].data_mut()[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Asserts tape gradients of every input match central differences.
pub fn check_gradients<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let grads = tape.backward(out).expect("backward");
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        let numeric = numeric_gradient(inputs, i, &f);
        let err = rel_err(analytic.data(), &numeric);
        assert!(err < FD_TOL, "input {i}: rel err {err:e}");
    }
}
