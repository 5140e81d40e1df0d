//! Central finite-difference gradient checks.

use crate::{Tape, Tensor, Var};

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
    /// Worst `|a - n| / max(|a|, |n|, floor)` over all checked coordinates.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Numeric gradient of the scalar `f` with respect to each input.
///
/// `skip(input, flat_index)` excludes coordinates, e.g. those near kinks.
pub fn numeric_gradient<F>(f: &F, inputs: &[Tensor<f64>], step: f64) -> Vec<Tensor<f64>>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        f(&tape, &vars).item()
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for k in 0..inputs[i].numel() {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + step;
            let plus = eval(&work);
            work[i].data_mut()[k] = orig - step;
            let minus = eval(&work);
            work[i].data_mut()[k] = orig;
            g.data_mut()[k] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// Analytic gradient of the scalar `f` via the tape.
pub fn analytic_gradient<F>(f: &F, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let y = f(&tape, &vars);
    let grads = tape.backward(y);
    vars.iter().map(|&v| grads.wrt(v)).collect()
}

/// Compares analytic and central-difference gradients.
pub fn check_gradients<F>(
    f: &F,
    inputs: &[Tensor<f64>],
    step: f64,
    floor: f64,
    skip: &dyn Fn(usize, usize) -> bool,
) -> GradCheck
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let analytic = analytic_gradient(f, inputs);
    let numeric = numeric_gradient(f, inputs, step);
    let mut max_rel_error = 0.0f64;
    let mut max_abs_error = 0.0f64;
    let mut checked = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for k in 0..a.numel() {
            if skip(i, k) {
                continue;
            }
            let (av, nv) = (a.data()[k], n.data()[k]);
            let err = (av - nv).abs();
            let denom = av.abs().max(nv.abs()).max(floor);
            max_rel_error = max_rel_error.max(err / denom);
            max_abs_error = max_abs_error.max(err);
            checked += 1;
        }
    }
    GradCheck { analytic, numeric, max_rel_error, max_abs_error, checked }
}
