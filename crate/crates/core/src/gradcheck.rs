//! Central finite-difference checking of tape gradients.
//!
//! A non-scalar output is reduced to a scalar by a weighted sum with fixed
//! pseudo-random weights in `[-1, 1]`. A plain sum would make several
//! operations (softmax, layer norm) have an identically zero gradient, and the
//! check would then compare finite-difference noise against zero.
//!
//! Relative errors use the denominator `max(|a|, |n|, floor)` with
//! `floor = REL_FLOOR · max(1, max |analytic|)` over the whole check, so a
//! gradient that is exactly zero is compared against round-off at the scale
//! of the largest gradient instead of an absolute constant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor in the relative-error denominator, relative to the gradient scale.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error_with_floor(a: f64, b: f64, floor: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / a.abs().max(b.abs()).max(floor)
}

/// Relative error at unit gradient scale.
pub fn relative_error(a: f64, b: f64) -> f64 {
    relative_error_with_floor(a, b, REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Upper bound on checked elements per input; larger inputs are
    /// subsampled deterministically. `None` checks every element.
    pub max_elements_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            max_elements_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InputReport {
    pub input: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().fold(0.0, |m, r| m.max(r.max_rel_err))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }
}

fn projection(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn reduce(tape: &mut Tape, out: Var, proj: &Option<Tensor>) -> Result<Var> {
    match proj {
        None => Ok(out),
        Some(w) => tape.dot_const(out, w),
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor], proj: &Option<Tensor>) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let s = reduce(&mut tape, out, proj)?;
    Ok(tape.value(s).item())
}

/// Compares tape gradients of `f` against central differences for every
/// input (or a deterministic subsample of each input's elements).
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let proj = (!tape.value(out).is_scalar()).then(|| projection(tape.shape(out), opts.seed));
    let loss = reduce(&mut tape, out, &proj)?;
    let grads = tape.backward(loss)?;
    let scale = vars
        .iter()
        .fold(1.0f64, |m, v| m.max(grads.wrt(*v).max_abs()));
    let floor = REL_FLOOR * scale;

    let mut pick_rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(17));
    let mut reports = Vec::with_capacity(inputs.len());
    for (k, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.wrt(*var);
        let n = input.numel();
        let elements: Vec<usize> = match opts.max_elements_per_input {
            Some(m) if m < n => rand::seq::index::sample(&mut pick_rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let mut rep = InputReport {
            input: k,
            checked: elements.len(),
            max_rel_err: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        let mut perturbed: Vec<Tensor> = inputs.to_vec();
        for &e in &elements {
            let base = input.data()[e];
            let mut eval_at = |v: f64| -> Result<f64> {
                let mut d = input.to_vec();
                d[e] = v;
                perturbed[k] = Tensor::from_parts(input.shape().to_vec(), d);
                evaluate(&f, &perturbed, &proj)
            };
            let plus = eval_at(base + opts.eps)?;
            let minus = eval_at(base - opts.eps)?;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.data()[e];
            let err = relative_error_with_floor(a, numeric, floor);
            if err > rep.max_rel_err || rep.checked == 0 {
                rep.max_rel_err = err;
                rep.worst_element = e;
                rep.analytic = a;
                rep.numeric = numeric;
            }
        }
        perturbed[k] = input.clone();
        reports.push(rep);
    }
    Ok(GradCheckReport {
        eps: opts.eps,
        tol: opts.tol,
        inputs: reports,
    })
}
