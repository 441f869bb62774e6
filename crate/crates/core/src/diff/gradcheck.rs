//! Central finite-difference checks of the reverse sweep.

use super::{Tape, Tensor};

const BASE_STEP: f64 = 1e-5;

/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Maximum relative error between the analytic gradient of the scalar `f` at
/// `x` and central differences with step `1e-5 * max(1, |x_i|)`.
pub fn finite_diff_check<F>(f: F, x: &[f64], shape: &[usize]) -> f64
where
    F: for<'t> Fn(&'t Tape, Tensor<'t>) -> Tensor<'t>,
{
    finite_diff_check_many(|tape, xs| f(tape, xs[0]), &[(x.to_vec(), shape.to_vec())])
}

/// Like [`finite_diff_check`] over several inputs at once; the result is the
/// maximum over every element of every input.
pub fn finite_diff_check_many<F>(f: F, inputs: &[(Vec<f64>, Vec<usize>)]) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Tensor<'t>]) -> Tensor<'t>,
{
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let xs: Vec<Tensor<'_>> = inputs.iter().map(|(v, s)| tape.leaf(v.clone(), s)).collect();
        let loss = f(&tape, &xs);
        tape.backward(loss).expect("gradient check needs a scalar loss");
        xs.iter()
            .zip(inputs)
            .map(|(x, (v, _))| x.grad().unwrap_or_else(|| vec![0.0; v.len()]))
            .collect()
    };

    let eval = |which: usize, at: usize, value: f64| -> f64 {
        let tape = Tape::new();
        let xs: Vec<Tensor<'_>> = inputs
            .iter()
            .enumerate()
            .map(|(i, (v, s))| {
                let mut v = v.clone();
                if i == which {
                    v[at] = value;
                }
                tape.constant(v, s)
            })
            .collect();
        f(&tape, &xs).item()
    };

    let mut worst: f64 = 0.0;
    for (which, (values, _)) in inputs.iter().enumerate() {
        for (at, &x) in values.iter().enumerate() {
            let h = BASE_STEP * x.abs().max(1.0);
            let numeric = (eval(which, at, x + h) - eval(which, at, x - h)) / (2.0 * h);
            worst = worst.max(relative_error(analytic[which][at], numeric));
        }
    }
    worst
}
