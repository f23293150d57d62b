//! Finite-difference validation of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Central-difference step.
pub const STEP: f64 = 1e-5;

/// Evaluates `f` on a fresh tape with `point` bound as leaves and returns the
/// analytic gradient for each leaf.
pub fn analytic_gradients<F>(f: &F, point: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    vars.iter().map(|&v| grads.wrt(&tape, v).map_err(Error::from)).collect()
}

fn evaluate<F>(f: &F, point: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item()?;
    if !value.is_finite() {
        return Err(Error::invalid("objective is non-finite at a perturbed point"));
    }
    Ok(value)
}

/// Central differences `(f(x + h) − f(x − h)) / 2h`, one coordinate at a time.
pub fn numeric_gradients<F>(f: &F, point: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for p in 0..point.len() {
        let mut g = Tensor::zeros(point[p].shape());
        for i in 0..point[p].len() {
            let orig = point[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let plus = evaluate(f, &work)?;
            work[p].data_mut()[i] = orig - step;
            let minus = evaluate(f, &work)?;
            work[p].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// `max |analytic − numeric| / max(1, |analytic|)` over every coordinate.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of `f` at `point` with central differences.
pub fn grad_check<F>(f: F, point: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, point)?;
    let numeric = numeric_gradients(&f, point, STEP)?;
    Ok(max_relative_error(&analytic, &numeric))
}
