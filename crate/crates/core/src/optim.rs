//! SGD with momentum and weight decay, plus learning-rate schedules.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Option<Vec<f32>>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// One step over `params`. Parameters whose gradient is `None` are left
    /// exactly as they are (no decay, no momentum carry-over).
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Tensor>], lr: f32) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Input(format!(
                "sgd: {} params but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.len() != params.len() {
            self.velocity = vec![None; params.len()];
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(Error::shape("sgd", format!("{:?} vs {:?}", p.shape(), g.shape())));
            }
            let buf = v.get_or_insert_with(|| vec![0.0; g.numel()]);
            for ((w, &gv), b) in p.data_mut().iter_mut().zip(g.data()).zip(buf.iter_mut()) {
                let d = gv + self.weight_decay * *w;
                *b = self.momentum * *b + d;
                *w -= lr * *b;
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f32, step: usize, total: usize) -> f32 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    (base as f64 * 0.5 * (1.0 + (PI * t).cos())) as f32
}

/// `base * factor^k` where `k` counts milestones already passed by `epoch`.
pub fn step_lr(base: f32, epoch: usize, milestones: &[usize], factor: f32) -> f32 {
    let k = milestones.iter().filter(|&&m| epoch >= m).count();
    base * factor.powi(k as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_momentum_matches_hand_recurrence() {
        let mut w = Tensor::from_slice(&[1], &[1.0]).unwrap();
        let mut opt = Sgd::new(0.9, 0.0);
        let g = [Some(Tensor::from_slice(&[1], &[1.0]).unwrap())];
        opt.step(vec![&mut w], &g, 0.1).unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-7);
        opt.step(vec![&mut w], &g, 0.1).unwrap();
        // v = 0.9 * 1 + 1 = 1.9
        assert!((w.data()[0] - 0.71).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_leaves_param_untouched() {
        let mut w = Tensor::from_slice(&[2], &[1.0, -2.0]).unwrap();
        let mut opt = Sgd::new(0.9, 5e-4);
        opt.step(vec![&mut w], &[None], 0.5).unwrap();
        assert_eq!(w.data(), &[1.0, -2.0]);
    }

    #[test]
    fn schedules() {
        assert_eq!(cosine_lr(0.4, 0, 10), 0.4);
        assert!(cosine_lr(0.4, 10, 10).abs() < 1e-7);
        assert!((cosine_lr(0.4, 5, 10) - 0.2).abs() < 1e-6);
        assert_eq!(step_lr(0.1, 14, &[15, 20], 0.1), 0.1);
        assert!((step_lr(0.1, 15, &[15, 20], 0.1) - 0.01).abs() < 1e-9);
        assert!((step_lr(0.1, 22, &[15, 20], 0.1) - 0.001).abs() < 1e-9);
    }
}
