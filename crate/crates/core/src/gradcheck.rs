//! Central-difference gradient checking for tape-built scalar functions.

use crate::error::{Error, Result};
use crate::nn::{Bound, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn eval<F>(f: &mut F, x: &Tensor) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    let v = tape.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("function value {v} is not finite")));
    }
    Ok(v)
}

/// Largest `|analytic - central| / max(1e-8, |central|)` over all coordinates of `x`.
pub fn finite_diff_check<F>(mut f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(xv).clone();
    drop(tape);

    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&mut f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&mut f, &probe)?;
        probe.data_mut()[i] = orig;
        let central = (up - down) / (2.0 * eps);
        let err = (analytic.data()[i] - central).abs() / central.abs().max(1e-8);
        if !err.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient error at coordinate {i}")));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// [`finite_diff_check`] over every tensor of `params` in turn; returns the worst error.
pub fn params_check<F>(params: &ParameterStore, mut f: F, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &Bound) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for (name, value) in params.iter() {
        let err = finite_diff_check(
            |tape, x| {
                let mut bound = params.bind(tape);
                bound.set(name, x)?;
                f(tape, &bound)
            },
            value,
            eps,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 4.0, 0.0, 2.5, -0.7]).unwrap();
        let err = finite_diff_check(|t, x| t.sum(x, None), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // exp(x) * const(exp(x)): the tape sees half of d/dx exp(2x)
        let x = Tensor::new(vec![1], vec![0.5]).unwrap();
        let err = finite_diff_check(
            |t, x| {
                let e = t.exp(x)?;
                let c = t.constant(t.value(e).clone());
                let y = t.mul(e, c)?;
                t.sum(y, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.4, "{err}");
    }
}
