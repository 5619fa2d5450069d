//! Central-difference gradient checking against the tape.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Max over coordinates of `|analytic - central| / max(1, |central|)`.
///
/// `f` builds a scalar expression of its input on a fresh tape.
pub fn grad_check<F>(f: F, x: &Tensor, h: f32) -> Result<f32>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, h, &all)
}

/// As [`grad_check`], restricted to the listed flat coordinates.
pub fn grad_check_at<F>(mut f: F, x: &Tensor, h: f32, coords: &[usize]) -> Result<f32>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("grad_check step must be positive, got {h}")));
    }
    let analytic = {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let y = f(&mut tape, xv)?;
        if tape.value(y).numel() != 1 {
            return Err(Error::NotScalar(tape.shape(y).to_vec()));
        }
        tape.backward(y)?;
        tape.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()))
    };
    let mut eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(probe);
        let y = f(&mut tape, xv)?;
        Ok(tape.scalar_value(y)? as f64)
    };
    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let central = (eval(plus)? - eval(minus)?) / (2.0 * h as f64);
        let a = analytic.data()[i] as f64;
        let err = (a - central).abs() / central.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_slice(&[4], &[0.3, -0.7, 0.9, 0.1]).unwrap();
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                t.sum(sq)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn constant_function_is_exact() {
        let x = Tensor::ones(&[3]);
        let err = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(2.5))),
            &x,
            1e-3,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_scalar_is_rejected() {
        let x = Tensor::ones(&[3]);
        assert!(grad_check(|t, v| t.relu(v), &x, 1e-3).is_err());
        assert!(grad_check(|t, v| t.sum(v), &x, 0.0).is_err());
    }
}
