//! Finite-difference verification of analytic gradients.
//!
//! A *fragment* is any differentiable computation built on a [`Tape`] from
//! registered parameter leaves. [`grad_check`] reduces the fragment output to
//! a scalar with a mean-absolute-error against zero, obtains analytic
//! gradients by one backward pass, then re-evaluates the loss with each
//! parameter element nudged `±step` to form central differences. Everything
//! runs in 64-bit, which keeps the finite-difference noise floor near 1e-11
//! and makes a 1e-4 relative tolerance a sharp test.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor3;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative errors are measured against `max(|a|, |b|, GRAD_SCALE_FLOOR)` so
/// that near-zero gradient pairs (both under the finite-difference noise
/// floor) are compared absolutely instead of blowing up the ratio.
pub const GRAD_SCALE_FLOOR: f64 = 1e-6;

/// A computation whose gradients are being verified: given a tape and one
/// leaf per parameter (in order), build the fragment's output value.
pub trait Fragment {
    fn build(&self, tape: &mut Tape, params: &[Var]) -> Result<Var>;
}

impl<F> Fragment for F
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    fn build(&self, tape: &mut Tape, params: &[Var]) -> Result<Var> {
        self(tape, params)
    }
}

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over every parameter element.
    pub max_rel_err: f64,
    /// Total number of scalar elements compared.
    pub compared: usize,
    /// `(parameter index, element index, analytic, numeric)` of the worst
    /// element, when any were compared.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Tolerance the check ran against.
    pub tolerance: f64,
    /// Whether `max_rel_err <= tolerance`.
    pub pass: bool,
}

fn loss_of(tape: &mut Tape, out: Var) -> Result<f64> {
    let zeros = tape.fill(tape.shape(out), 0.0);
    let loss = tape.l1_loss(out, zeros)?;
    tape.scalar(loss)
}

/// Gradients of the scalarized fragment via one tape backward pass.
pub fn analytic_grads(params: &[Tensor3], fragment: &dyn Fragment) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p.set_requires_grad(true);
            tape.leaf(&p)
        })
        .collect();
    let out = fragment.build(&mut tape, &vars)?;
    let zeros = tape.fill(tape.shape(out), 0.0);
    let loss = tape.l1_loss(out, zeros)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(v, p)| tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect())
}

/// Central-difference gradients: each element evaluated at `±step`.
pub fn finite_difference_grads(
    params: &[Tensor3],
    fragment: &dyn Fragment,
    step: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut work: Vec<Tensor3> = params
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p.set_requires_grad(false);
            p
        })
        .collect();

    let eval = |work: &[Tensor3]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = work.iter().map(|p| tape.leaf(p)).collect();
        let out = fragment.build(&mut tape, &vars)?;
        loss_of(&mut tape, out)
    };

    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let n = params[pi].len();
        let mut g = vec![0.0; n];
        for ei in 0..n {
            let original = work[pi].data()[ei];
            work[pi].data_mut()[ei] = original + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = original - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = original;
            g[ei] = (plus - minus) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Worst-case relative disagreement between two gradient sets.
pub fn compare_grads(
    analytic: &[Vec<f64>],
    numeric: &[Vec<f64>],
    tolerance: f64,
) -> GradCheckReport {
    let mut max_rel_err: f64 = 0.0;
    let mut compared = 0;
    let mut worst = None;
    for (pi, (a_param, n_param)) in analytic.iter().zip(numeric).enumerate() {
        for (ei, (&a, &n)) in a_param.iter().zip(n_param).enumerate() {
            let scale = a.abs().max(n.abs()).max(GRAD_SCALE_FLOOR);
            let rel = (a - n).abs() / scale;
            compared += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((pi, ei, a, n));
            }
        }
    }
    GradCheckReport { max_rel_err, compared, worst, tolerance, pass: max_rel_err <= tolerance }
}

/// Verify a fragment's analytic gradients against central differences with
/// the default step.
pub fn grad_check(
    params: &[Tensor3],
    fragment: &dyn Fragment,
    tolerance: f64,
) -> Result<GradCheckReport> {
    grad_check_with_step(params, fragment, tolerance, DEFAULT_STEP)
}

/// [`grad_check`] with an explicit finite-difference step.
pub fn grad_check_with_step(
    params: &[Tensor3],
    fragment: &dyn Fragment,
    tolerance: f64,
    step: f64,
) -> Result<GradCheckReport> {
    let analytic = analytic_grads(params, fragment)?;
    let numeric = finite_difference_grads(params, fragment, step)?;
    Ok(compare_grads(&analytic, &numeric, tolerance))
}
