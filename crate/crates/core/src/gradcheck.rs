//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric|` over all coordinates.
    pub max_abs_err: f64,
    /// `max_abs_err` normalised by the larger of the two gradients' max-norms.
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Compares the tape gradient of a scalar graph against central differences.
///
/// `build` receives a fresh tape and the recorded input and must return the
/// scalar output. It is called once with gradients enabled and twice per
/// input coordinate for the numeric estimate.
pub fn grad_check<T, F>(build: F, input: &Tensor<T>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone().with_grad());
    let out = build(&mut tape, x)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::shape("grad_check", "graph output must be scalar"));
    }
    tape.backward(out)?;
    let analytic: Vec<f64> = match tape.grad(x) {
        Some(g) => g.iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; input.numel()],
    };
    let numeric = numeric_grad(&build, input, eps)?;
    Ok(compare(&analytic, &numeric, tol))
}

/// Central-difference gradient of a scalar graph.
pub fn numeric_grad<T, F>(build: &F, input: &Tensor<T>, eps: f64) -> Result<Vec<f64>>
where
    T: Element,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let eval = |x: Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let out = build(&mut tape, v)?;
        Ok(tape.value(out).item().as_f64())
    };
    let mut grad = Vec::with_capacity(input.numel());
    for i in 0..input.numel() {
        let mut plus = input.clone();
        let mut minus = input.clone();
        let base = input.data()[i].as_f64();
        plus.data_mut()[i] = T::of(base + eps);
        minus.data_mut()[i] = T::of(base - eps);
        // Use the perturbation actually representable in T.
        let step = plus.data()[i].as_f64() - minus.data()[i].as_f64();
        grad.push((eval(plus)? - eval(minus)?) / step);
    }
    Ok(grad)
}

pub fn compare(analytic: &[f64], numeric: &[f64], tol: f64) -> GradCheckReport {
    let max_abs_err = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let norm = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = norm(analytic).max(norm(numeric)).max(f64::MIN_POSITIVE);
    let max_rel_err = max_abs_err / scale;
    GradCheckReport {
        max_abs_err,
        max_rel_err,
        tolerance: tol,
        checked: analytic.len(),
        passed: max_rel_err <= tol,
    }
}
