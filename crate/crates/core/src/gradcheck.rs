//! Central finite-difference gradient oracle.
//!
//! The oracle only ever evaluates the function forward, on a fresh tape with
//! the parameters bound as constants, so it shares nothing with the reverse
//! sweep it checks.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient comparison. `worst_param`/`worst_index` locate the
/// coordinate that produced `max_rel_error`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Evaluates `f` and its reverse-mode gradient with respect to `params`.
pub fn analytic_gradient<F>(f: &F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("f returned {value}")));
    }
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().expect("params require grad"))
        .collect();
    Ok((value, grads))
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let t = tape.value(loss);
    if !t.is_scalar() {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    let value = t.item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("f returned {value}")));
    }
    Ok(value)
}

/// `(f(θ + eps·e_i) − f(θ − eps·e_i)) / 2eps` for every coordinate.
pub fn numerical_gradient<F>(f: &F, params: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("eps must be positive, got {eps}")));
    }
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].shape());
        for c in 0..params[p].len() {
            let orig = work[p].data()[c];
            work[p].data_mut()[c] = orig + eps;
            let plus = evaluate(f, &work)?;
            work[p].data_mut()[c] = orig - eps;
            let minus = evaluate(f, &work)?;
            work[p].data_mut()[c] = orig;
            grad.data_mut()[c] = (plus - minus) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Max over coordinates of `|analytic − fd| / max(1, |fd|)`.
pub fn compare_gradients(analytic: &[Tensor], numeric: &[Tensor]) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: 0,
        worst_index: 0,
        coordinates: 0,
    };
    for (p, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        assert_eq!(a.shape(), n.shape());
        for (c, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let err = (av - nv).abs() / nv.abs().max(1.0);
            report.coordinates += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst_param = p;
                report.worst_index = c;
            }
        }
    }
    report
}

pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (_, analytic) = analytic_gradient(&f, params)?;
    let numeric = numerical_gradient(&f, params, eps)?;
    Ok(compare_gradients(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_nearly_exact() {
        // f(x) = sum(x ⊙ x) + sum(3x)
        let f = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
            let sq = tape.mul(v[0], v[0])?;
            let lin = tape.scale(v[0], 3.0);
            let s = tape.add(sq, lin)?;
            Ok(tape.sum(s))
        };
        let x = Tensor::from_rows(&[[0.3, -1.2], [2.0, 0.7]]);
        let r = finite_diff_check(f, &[x], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.coordinates, 4);
    }

    #[test]
    fn rejects_non_positive_eps() {
        let f = |tape: &mut Tape, v: &[Var]| -> Result<Var> { Ok(tape.sum(v[0])) };
        assert!(finite_diff_check(f, &[Tensor::zeros(&[1, 1])], 0.0).is_err());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let f = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
            tape.binary_cross_entropy(v[0], &[1.0])
        };
        // p = 0 with a positive target gives +inf.
        let r = finite_diff_check(f, &[Tensor::zeros(&[1, 1])], 1e-6);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
