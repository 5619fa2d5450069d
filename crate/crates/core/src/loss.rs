//! Classification losses on `[n, C]` logits, all averaged over the batch.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_logits(tape: &Tape, logits: Var, op: &'static str) -> Result<(usize, usize)> {
    let s = tape.shape(logits);
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::shape(op, format!("expected non-empty [n, C] logits, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

/// Sum over the batch of `-log softmax(logits)[y]`.
pub fn cross_entropy_sum(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = check_logits(tape, logits, "cross_entropy")?;
    if labels.len() != n {
        return Err(Error::shape("cross_entropy", format!("{n} rows, {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Input(format!("cross_entropy: label {bad} >= {c} classes")));
    }
    let lp = tape.log_softmax(logits, 1)?;
    let picked = tape.gather(lp, labels)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0)
}

/// Mean cross-entropy.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let n = labels.len().max(1);
    let s = cross_entropy_sum(tape, logits, labels)?;
    tape.scale(s, 1.0 / n as f32)
}

/// Sum over the batch of `KL(softmax(p) || softmax(q))`.
pub fn kl_divergence_sum(tape: &mut Tape, p_logits: Var, q_logits: Var) -> Result<Var> {
    check_logits(tape, p_logits, "kl_divergence")?;
    if tape.shape(p_logits) != tape.shape(q_logits) {
        return Err(Error::shape(
            "kl_divergence",
            format!("{:?} vs {:?}", tape.shape(p_logits), tape.shape(q_logits)),
        ));
    }
    let lp = tape.log_softmax(p_logits, 1)?;
    let lq = tape.log_softmax(q_logits, 1)?;
    let p = tape.softmax(p_logits, 1)?;
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(p, diff)?;
    tape.sum(terms)
}

/// Batch-mean `KL(softmax(p) || softmax(q))`.
pub fn kl_divergence(tape: &mut Tape, p_logits: Var, q_logits: Var) -> Result<Var> {
    let n = tape.shape(p_logits).first().copied().unwrap_or(1).max(1);
    let s = kl_divergence_sum(tape, p_logits, q_logits)?;
    tape.scale(s, 1.0 / n as f32)
}

/// Sum over the batch of the cross-entropy between `softmax(teacher / T)`
/// targets and `log_softmax(logits / T)`.
pub fn distill_sum(tape: &mut Tape, logits: Var, teacher: &Tensor, temperature: f32) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("distillation temperature must be positive, got {temperature}")));
    }
    check_logits(tape, logits, "distill")?;
    if tape.shape(logits) != teacher.shape() {
        return Err(Error::shape(
            "distill",
            format!("logits {:?} vs teacher {:?}", tape.shape(logits), teacher.shape()),
        ));
    }
    let t = tape.constant(teacher.clone());
    let t = tape.scale(t, 1.0 / temperature)?;
    let targets = tape.softmax(t, 1)?;
    let s = tape.scale(logits, 1.0 / temperature)?;
    let ls = tape.log_softmax(s, 1)?;
    let prod = tape.mul(targets, ls)?;
    let total = tape.sum(prod)?;
    tape.scale(total, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng;

    fn value(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut t = Tape::new();
        let v = f(&mut t).unwrap();
        t.scalar_value(v).unwrap() as f64
    }

    #[test]
    fn cross_entropy_hand_values() {
        let logits = Tensor::from_slice(&[2, 2], &[0.0, 0.0, 2.0, 0.0]).unwrap();
        let got = value(|t| {
            let l = t.constant(logits.clone());
            cross_entropy(t, l, &[0, 1])
        });
        let want = (2f64.ln() + (1.0 + 2f64.exp()).ln() - 0.0) / 2.0;
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn kl_hand_value_and_zero_on_equal() {
        let p = Tensor::from_slice(&[1, 2], &[1.0, 0.0]).unwrap();
        let q = Tensor::from_slice(&[1, 2], &[0.0, 0.0]).unwrap();
        let got = value(|t| {
            let (a, b) = (t.constant(p.clone()), t.constant(q.clone()));
            kl_divergence(t, a, b)
        });
        let p0 = 1f64.exp() / (1.0 + 1f64.exp());
        let want = p0 * (p0 / 0.5).ln() + (1.0 - p0) * ((1.0 - p0) / 0.5).ln();
        assert!((got - want).abs() < 1e-6);
        let same = value(|t| {
            let (a, b) = (t.constant(p.clone()), t.constant(p.clone()));
            kl_divergence(t, a, b)
        });
        assert_eq!(same, 0.0);
    }

    #[test]
    fn one_hot_teacher_at_unit_temperature_is_cross_entropy() {
        let logits = Tensor::from_slice(&[1, 3], &[0.3, -1.2, 2.0]).unwrap();
        // a very confident teacher is numerically one-hot
        let teacher = Tensor::from_slice(&[1, 3], &[0.0, 200.0, 0.0]).unwrap();
        let d = value(|t| {
            let l = t.constant(logits.clone());
            distill_sum(t, l, &teacher, 1.0)
        });
        let ce = value(|t| {
            let l = t.constant(logits.clone());
            cross_entropy_sum(t, l, &[1])
        });
        assert!((d - ce).abs() < 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng::stream(2, "loss", 0);
        let x = Tensor::randn(&[4, 3], 1.0, &mut r);
        let other = Tensor::randn(&[4, 3], 1.0, &mut r);
        let e = grad_check(|t, v| cross_entropy(t, v, &[0, 2, 1, 1]), &x, 1e-3).unwrap();
        assert!(e < 1e-3);
        let o = other.clone();
        let e = grad_check(
            move |t, v| {
                let c = t.constant(o.clone());
                kl_divergence(t, c, v)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(e < 1e-3);
        let e = grad_check(|t, v| distill_sum(t, v, &other, 2.0), &x, 1e-3).unwrap();
        assert!(e < 1e-3);
    }

    #[test]
    fn errors() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::zeros(&[2, 2]));
        assert!(cross_entropy(&mut t, l, &[0]).is_err());
        assert!(cross_entropy(&mut t, l, &[0, 2]).is_err());
        assert!(distill_sum(&mut t, l, &Tensor::zeros(&[2, 2]), 0.0).is_err());
        assert!(distill_sum(&mut t, l, &Tensor::zeros(&[2, 3]), 1.0).is_err());
    }
}
