//! Central finite-difference checks for analytic gradients.
//!
//! The numeric side only evaluates the function, so it is independent of
//! every backward rule it is used to validate.

use crate::{grad, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Per input: `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over
    /// the probed coordinates.
    pub relative_errors: Vec<f64>,
    pub analytic_norms: Vec<f64>,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares `grad(f(inputs))` with central differences of step `step`.
///
/// `f` must return a single-element tensor. At most `max_coords` coordinates
/// per input are probed, evenly strided through the tensor.
pub fn check<F>(f: F, inputs: &[Tensor], step: f64, max_coords: usize) -> GradCheck
where
    F: Fn(&[Var]) -> Var,
{
    let vars: Vec<Var> = inputs.iter().map(|t| Var::param(t.clone())).collect();
    let out = f(&vars);
    let refs: Vec<&Var> = vars.iter().collect();
    let analytic = grad(&out, &refs, false);

    // Inputs enter as constants; recording stays on so functions that take
    // inner gradients (penalties on input gradients) evaluate correctly.
    let eval = |xs: Vec<Tensor>| -> f64 {
        let vs: Vec<Var> = xs.into_iter().map(Var::constant).collect();
        f(&vs).item()
    };

    let mut relative_errors = Vec::new();
    let mut analytic_norms = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let stride = (n / max_coords.max(1)).max(1);
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        let a_flat: Vec<f64> = analytic[i].value().iter().cloned().collect();
        for j in (0..n).step_by(stride) {
            let mut plus: Vec<Tensor> = inputs.to_vec();
            let mut minus: Vec<Tensor> = inputs.to_vec();
            *plus[i].iter_mut().nth(j).unwrap() += step;
            *minus[i].iter_mut().nth(j).unwrap() -= step;
            let numeric = (eval(plus) - eval(minus)) / (2.0 * step);
            let a = a_flat[j];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        relative_errors.push(if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale });
        analytic_norms.push(a2.sqrt());
    }
    GradCheck { relative_errors, analytic_norms }
}
