//! Finite-difference gradient checking.

use crate::autodiff::Tape;
use crate::error::Result;
use crate::model::{LossMask, Model};
use crate::rng::RngState;
use crate::tasks::Token;
use crate::tensor::Scalar;
use serde::Serialize;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of `f` along coordinate `index` of `x`.
pub fn central_difference<T: Scalar, F: FnMut(&[T]) -> f64>(f: &mut F, x: &mut [T], index: usize, eps: f64) -> f64 {
    let orig = x[index];
    x[index] = T::of(orig.f64() + eps);
    let plus = f(x);
    x[index] = T::of(orig.f64() - eps);
    let minus = f(x);
    x[index] = orig;
    (plus - minus) / (2.0 * eps)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    /// `(coordinate, analytic, numeric)` for coordinates over tolerance.
    pub failures: Vec<(usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_relative_error = self.max_relative_error.max(other.max_relative_error);
        self.failures.extend(other.failures);
    }
}

/// Compares `analytic` against central differences of `f` on `coords`.
pub fn check_gradient<T: Scalar, F: FnMut(&[T]) -> f64>(
    mut f: F,
    x: &mut [T],
    analytic: &[T],
    coords: &[usize],
    eps: f64,
    rel_tol: f64,
    floor: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for &i in coords {
        let numeric = central_difference(&mut f, x, i, eps);
        let a = analytic[i].f64();
        let err = relative_error(a, numeric, floor);
        report.checked += 1;
        report.max_relative_error = report.max_relative_error.max(err);
        if err > rel_tol {
            report.failures.push((i, a, numeric));
        }
    }
    report
}

/// Loss of `model` on a batch, without dropout.
pub fn model_loss(model: &Model<f64>, prompts: &[&[Token]], targets: &[&[Token]], mask: LossMask) -> Result<f64> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let loss = model.loss_graph(&mut tape, &p, prompts, targets, mask, None)?;
    Ok(tape.value(loss)[0])
}

/// Finite-difference check of the full model on `per_tensor` random
/// coordinates of every parameter tensor.
#[allow(clippy::too_many_arguments)]
pub fn check_model_gradients(
    model: &Model<f64>,
    prompts: &[&[Token]],
    targets: &[&[Token]],
    mask: LossMask,
    per_tensor: usize,
    rng: &mut RngState,
    eps: f64,
    rel_tol: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let loss = model.loss_graph(&mut tape, &vars, prompts, targets, mask, None)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
        .collect();
    drop(tape);
    let mut probe = model.clone();
    let mut report = GradCheckReport::default();
    let mut offset = 0;
    for (i, grad) in analytic.iter().enumerate() {
        let coords: Vec<usize> = (0..per_tensor.min(grad.len())).map(|_| rng.below(grad.len())).collect();
        let mut x = probe.params()[i].data().to_vec();
        let mut f = |v: &[f64]| {
            probe.params_mut()[i].data_mut().copy_from_slice(v);
            model_loss(&probe, prompts, targets, mask).unwrap_or(f64::NAN)
        };
        let mut r = check_gradient(&mut f, &mut x, grad, &coords, eps, rel_tol, floor);
        probe.params_mut()[i].data_mut().copy_from_slice(&x);
        for fail in &mut r.failures {
            fail.0 += offset;
        }
        report.merge(r);
        offset += grad.len();
    }
    Ok(report)
}
