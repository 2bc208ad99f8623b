//! Central finite-difference oracle for unit tests.

use crate::tensor::{Tape, Tensor, Var};

/// Gradients below this magnitude are compared absolutely: an entry that is
/// exactly zero analytically still carries ~1e-10 of finite-difference
/// round-off.
const GRAD_FLOOR: f64 = 1e-5;

/// Builds a scalar from `inputs` on a fresh tape, compares the tape
/// gradient of each input against central differences, and returns the
/// worst relative error.
pub(crate) fn max_grad_rel_err<F>(inputs: &[Tensor], step: f64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |inputs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).data()[0]
    };

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[i];
            probe[ti].data_mut()[i] = orig + step;
            let up = eval(&probe);
            probe[ti].data_mut()[i] = orig - step;
            let down = eval(&probe);
            probe[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

/// Deterministic pseudo-random tensor for tests.
pub(crate) fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape.to_vec(), 1.0, &mut rng)
}
