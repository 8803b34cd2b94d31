//! Finite-difference verification of tape gradients (always in `f64`).

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute rather than relative
/// terms, so round-off on near-zero entries does not dominate.
pub const RELATIVE_FLOOR: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("finite-difference step {eps} outside [1e-6, 1e-3]")));
    }
    Ok(())
}

fn eval_scalar(tape: &Tape<f64>, y: Var) -> Result<f64> {
    let v = tape.value(y);
    if v.len() != 1 {
        return Err(Error::Dimension(format!("grad_check needs a scalar output, got {:?}", v.shape())));
    }
    let s = v.data()[0];
    if !s.is_finite() {
        return Err(Error::Eval(format!("function value is not finite: {s}")));
    }
    Ok(s)
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// finite differences.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv)?;
    eval_scalar(&tape, y)?;
    let grads = tape.backward(y)?;
    let analytic = grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval_at = |pt: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::inference();
        let v = t.constant(pt);
        let y = f(&mut t, v)?;
        eval_scalar(&t, y)
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval_at(plus)? - eval_at(minus)?) / (2.0 * eps);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same check with respect to every parameter of a store.
pub fn grad_check_params<F>(f: F, store: &ParamStore<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    check_eps(eps)?;
    let mut tape = Tape::new();
    let bound = tape.bind(store);
    let y = f(&mut tape, &bound)?;
    eval_scalar(&tape, y)?;
    let analytic = tape.backward(y)?.params(&bound, store);

    let eval_at = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::inference();
        let b = t.bind_frozen(s);
        let y = f(&mut t, &b)?;
        eval_scalar(&t, y)
    };
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for (pi, g) in analytic.iter().enumerate() {
        for i in 0..g.len() {
            let orig = probe.tensors()[pi].data()[i];
            probe.tensors_mut()[pi].data_mut()[i] = orig + eps;
            let up = eval_at(&probe)?;
            probe.tensors_mut()[pi].data_mut()[i] = orig - eps;
            let down = eval_at(&probe)?;
            probe.tensors_mut()[pi].data_mut()[i] = orig;
            worst = worst.max(rel_err(g.data()[i], (up - down) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let err = grad_check(
            |t, x| {
                let s = t.square(x);
                Ok(t.sum_all(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_exactly_zero_gradient() {
        let x = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let c = tape.constant(Tensor::scalar(4.0));
        let zero = tape.scale(xv, 0.0);
        let s = tape.sum_all(zero);
        let y = tape.add(s, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.wrt(xv).unwrap().data().iter().all(|&v| v == 0.0));
        let err = grad_check(
            |t, x| {
                let z = t.scale(x, 0.0);
                let s = t.sum_all(z);
                Ok(t.add_scalar(s, 4.0))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_value_is_eval_error() {
        let x = Tensor::from_f64(&[1], &[-1.0]).unwrap();
        let r = grad_check(|t, x| Ok(t.unary(x, super::super::tape::Unary::Log)), &x, 1e-5);
        assert!(matches!(r, Err(Error::Eval(_))));
    }

    #[test]
    fn eps_outside_range_rejected() {
        let x = Tensor::from_f64(&[1], &[1.0]).unwrap();
        assert!(grad_check(|t, x| Ok(t.sum_all(x)), &x, 1e-2).is_err());
    }
}
