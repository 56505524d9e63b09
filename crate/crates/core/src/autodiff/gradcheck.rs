//! Central finite-difference verification of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error between two gradient tensors, `‖a−n‖ / (‖a‖+‖n‖)`.
/// Pairs that are both numerically zero count as exact.
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.norm() + numeric.norm();
    if scale < 1e-7 {
        0.0
    } else {
        diff / scale
    }
}

/// Reduce a non-scalar output to a scalar with fixed pseudo-random weights,
/// so every output element contributes a distinct direction.
fn scalarize(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w = Tensor::<f64>::randn(shape, 1.0, &mut rng);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn eval(f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let out = scalarize(&mut tape, out)?;
    Ok(tape.value(out).item())
}

/// Compare analytic and central-difference gradients of `f` with respect to
/// every input. Returns the worst relative error across inputs.
pub fn check(
    f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    step: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let out = scalarize(&mut tape, out)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .ok_or_else(|| Error::invalid("gradcheck", "input lost its gradient"))?;
        let mut numeric = Tensor::zeros(input.shape().to_vec());
        let mut probe = inputs.to_vec();
        for j in 0..input.len() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + step;
            let plus = eval(f, &probe)?;
            probe[i].data_mut()[j] = orig - step;
            let minus = eval(f, &probe)?;
            probe[i].data_mut()[j] = orig;
            numeric.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

type ModelFn<'a> = dyn Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var> + 'a;

fn eval_model(f: &ModelFn<'_>, store: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, store, &vars)?;
    let out = scalarize(&mut tape, out)?;
    Ok(tape.value(out).item())
}

/// Like [`check`] for a model whose weights live in `store`: every trainable
/// parameter and every input is probed. Returns the worst relative error.
pub fn check_model(f: &ModelFn<'_>, store: &ParamStore<f64>, inputs: &[Tensor<f64>], step: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, store, &vars)?;
    let out = scalarize(&mut tape, out)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .ok_or_else(|| Error::invalid("gradcheck", "input lost its gradient"))?;
        let mut numeric = Tensor::zeros(input.shape().to_vec());
        let mut probe = inputs.to_vec();
        for j in 0..input.len() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + step;
            let plus = eval_model(f, store, &probe)?;
            probe[i].data_mut()[j] = orig - step;
            let minus = eval_model(f, store, &probe)?;
            probe[i].data_mut()[j] = orig;
            numeric.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }

    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_owned())
        .collect();
    let mut probe = store.clone();
    for name in names {
        let value = store.get(&name).expect("listed").clone();
        let analytic = grads
            .by_name(&name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()));
        let mut numeric = Tensor::zeros(value.shape().to_vec());
        let mut v = value.clone();
        for j in 0..value.len() {
            let orig = value.data()[j];
            v.data_mut()[j] = orig + step;
            probe.set(&name, v.clone())?;
            let plus = eval_model(f, &probe, inputs)?;
            v.data_mut()[j] = orig - step;
            probe.set(&name, v.clone())?;
            let minus = eval_model(f, &probe, inputs)?;
            v.data_mut()[j] = orig;
            numeric.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        probe.set(&name, value)?;
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}
