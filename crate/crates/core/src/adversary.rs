//! ℓ∞ projected gradient attacks.
//!
//! Every iterate is projected onto the intersection of the ε-ball around the
//! clean input and the pixel bounds. The projection rounds inward, so the
//! returned point satisfies `|x_adv - x| <= ε` and the bounds exactly when
//! checked in exact arithmetic, not just up to `f32` rounding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::contrastive::nt_xent;
use crate::error::{Error, Result};
use crate::nn::{BnMode, BranchMode, ModelParams, Trainable};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f32,
    pub step_size: f32,
    pub steps: usize,
    pub random_start: bool,
    pub bounds: (f32, f32),
}

impl AttackConfig {
    /// Attack used inside contrastive pretraining.
    pub fn pretrain() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps: 5,
            random_start: true,
            bounds: (0.0, 1.0),
        }
    }

    /// Attack used to measure robust accuracy.
    pub fn eval() -> Self {
        AttackConfig {
            steps: 20,
            ..Self::pretrain()
        }
    }

    pub fn with_epsilon(mut self, epsilon: f32) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.steps > 0 && !(self.step_size > 0.0) {
            return Err(Error::Config("step_size must be positive when steps > 0".into()));
        }
        if !(self.bounds.0 < self.bounds.1) {
            return Err(Error::Config(format!("invalid pixel bounds {:?}", self.bounds)));
        }
        Ok(())
    }
}

/// Elementwise clamp of a perturbation to `[-ε, ε]`.
pub fn project_linf(delta: &Tensor, epsilon: f32) -> Tensor {
    delta.map(|d| d.clamp(-epsilon, epsilon))
}

/// Largest `f32` not above `v`.
fn f32_floor(v: f64) -> f32 {
    let r = v as f32;
    if r as f64 > v {
        r.next_down()
    } else {
        r
    }
}

/// Smallest `f32` not below `v`.
fn f32_ceil(v: f64) -> f32 {
    let r = v as f32;
    if (r as f64) < v {
        r.next_up()
    } else {
        r
    }
}

/// Feasible interval for one coordinate, rounded inward to `f32`.
fn feasible_range(x: f32, epsilon: f32, bounds: (f32, f32)) -> (f32, f32) {
    let lo = (x as f64 - epsilon as f64).max(bounds.0 as f64);
    let hi = (x as f64 + epsilon as f64).min(bounds.1 as f64);
    (f32_ceil(lo), f32_floor(hi))
}

/// Projects `candidate` onto the feasible set around `clean`.
pub fn project_feasible(clean: &Tensor, candidate: &Tensor, cfg: &AttackConfig) -> Tensor {
    let data = clean
        .data()
        .iter()
        .zip(candidate.data())
        .map(|(&x, &c)| {
            let (lo, hi) = feasible_range(x, cfg.epsilon, cfg.bounds);
            if lo > hi {
                // clean value itself outside the bounds; stay put
                x
            } else {
                c.clamp(lo, hi)
            }
        })
        .collect();
    Tensor::new(clean.shape().to_vec(), data).unwrap()
}

/// Exact-arithmetic feasibility check.
pub fn is_feasible(clean: &Tensor, adv: &Tensor, epsilon: f32, bounds: (f32, f32)) -> bool {
    clean.shape() == adv.shape()
        && clean.data().iter().zip(adv.data()).all(|(&x, &a)| {
            (a as f64 - x as f64).abs() <= epsilon as f64 && a >= bounds.0 && a <= bounds.1
        })
}

/// Loss value and gradient of a tape expression with respect to its input.
pub fn input_gradient<F>(x: &Tensor, f: &mut F) -> Result<(f32, Tensor)>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xv)?;
    let value = tape.scalar_value(loss)?;
    tape.backward(loss)?;
    let g = tape.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((value, g))
}

/// Maximizes `loss(x')` over the feasible set by signed-gradient ascent.
///
/// `loss` builds a scalar expression of its (leaf) input on a fresh tape.
/// Model parameters inside it should be bound without gradients.
pub fn pgd_attack<R, F>(x: &Tensor, cfg: &AttackConfig, rng: &mut R, loss: F) -> Result<Tensor>
where
    R: Rng + ?Sized,
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    cfg.validate()?;
    let start = if cfg.random_start {
        random_start(x, cfg, rng)?
    } else {
        x.clone()
    };
    pgd_attack_from(x, &start, cfg, loss)
}

/// Uniform draw from the `epsilon` box around `x`, clipped to the bounds.
pub fn random_start<R: Rng + ?Sized>(x: &Tensor, cfg: &AttackConfig, rng: &mut R) -> Result<Tensor> {
    let eps = cfg.epsilon;
    let data = x
        .data()
        .iter()
        .map(|&v| v + eps * (2.0 * rng.gen::<f32>() - 1.0))
        .collect();
    let start = Tensor::new(x.shape().to_vec(), data)?;
    Ok(project_feasible(x, &start, cfg))
}

/// PGD iterations around `x` beginning at `start` (which is projected first).
pub fn pgd_attack_from<F>(x: &Tensor, start: &Tensor, cfg: &AttackConfig, mut loss: F) -> Result<Tensor>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    cfg.validate()?;
    if start.shape() != x.shape() {
        return Err(Error::shape("pgd_attack", format!("start {:?} vs x {:?}", start.shape(), x.shape())));
    }
    let mut adv = project_feasible(x, start, cfg);
    if cfg.epsilon == 0.0 {
        return Ok(adv);
    }
    for _ in 0..cfg.steps {
        let (_, g) = input_gradient(&adv, &mut loss)?;
        if !g.all_finite() {
            return Err(Error::NonFinite { op: "pgd_attack gradient" });
        }
        let step = cfg.step_size;
        let moved = Tensor::new(
            adv.shape().to_vec(),
            adv.data()
                .iter()
                .zip(g.data())
                .map(|(&a, &d)| a + step * sign(d))
                .collect(),
        )?;
        adv = project_feasible(x, &moved, cfg);
    }
    Ok(adv)
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Jointly perturbs both views of an interleaved `[2N, c, h, w]` batch to
/// maximize the contrastive loss through the given batch-norm branch.
/// Batch statistics are used but running statistics are not updated.
pub fn joint_contrastive_attack<R: Rng + ?Sized>(
    model: &mut ModelParams,
    views: &Tensor,
    branch: BranchMode,
    cfg: &AttackConfig,
    temperature: f32,
    rng: &mut R,
) -> Result<Tensor> {
    pgd_attack(views, cfg, rng, |tape, xv| {
        let bound = model.bind(tape, Trainable::NONE);
        let z = model.embed(tape, &bound, xv, branch, BnMode::Frozen)?;
        nt_xent(tape, z, temperature)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn linear_loss(w: Tensor) -> impl FnMut(&mut Tape, Var) -> Result<Var> {
        move |tape, xv| {
            let wv = tape.constant(w.clone());
            let p = tape.mul(xv, wv)?;
            tape.sum(p)
        }
    }

    #[test]
    fn projection_clamps() {
        let d = Tensor::from_slice(&[2], &[0.3, -0.2]).unwrap();
        assert_eq!(project_linf(&d, 0.1).data(), &[0.1, -0.1]);
        let f = Tensor::from_slice(&[2], &[0.05, -0.02]).unwrap();
        assert_eq!(project_linf(&f, 0.1), f);
        assert_eq!(project_linf(&d, 0.0).data(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_budget_returns_input() {
        let x = Tensor::from_slice(&[3], &[0.2, 0.5, 0.9]).unwrap();
        let w = Tensor::from_slice(&[3], &[1.0, -1.0, 2.0]).unwrap();
        let cfg = AttackConfig::eval().with_epsilon(0.0);
        let adv = pgd_attack(&x, &cfg, &mut rng::stream(0, "a", 0), linear_loss(w)).unwrap();
        assert_eq!(adv, x);
    }

    #[test]
    fn no_steps_no_start_is_identity() {
        let x = Tensor::from_slice(&[2], &[0.2, 0.5]).unwrap();
        let cfg = AttackConfig {
            steps: 0,
            random_start: false,
            ..AttackConfig::eval()
        };
        let adv = pgd_attack(&x, &cfg, &mut rng::stream(0, "a", 0), linear_loss(Tensor::ones(&[2]))).unwrap();
        assert_eq!(adv, x);
    }

    #[test]
    fn linear_loss_moves_to_signed_corner() {
        // dyadic values keep x +- eps exactly representable
        let x = Tensor::from_slice(&[4], &[0.25, 0.5, 0.375, 0.625]).unwrap();
        let w = Tensor::from_slice(&[4], &[1.0, -2.0, 0.5, -0.1]).unwrap();
        let cfg = AttackConfig {
            epsilon: 0.125,
            step_size: 0.125,
            steps: 3,
            random_start: true,
            bounds: (0.0, 1.0),
        };
        let adv = pgd_attack(&x, &cfg, &mut rng::stream(1, "a", 0), linear_loss(w.clone())).unwrap();
        let want: Vec<f32> = x
            .data()
            .iter()
            .zip(w.data())
            .map(|(&xv, &wv)| xv + 0.125 * wv.signum())
            .collect();
        assert_eq!(adv.data(), want.as_slice());
    }

    #[test]
    fn linear_loss_non_dyadic_budget_is_inward_rounded_corner() {
        let x = Tensor::from_slice(&[3], &[0.5, 0.3, 0.7]).unwrap();
        let w = Tensor::from_slice(&[3], &[1.0, -1.0, 3.0]).unwrap();
        let cfg = AttackConfig {
            epsilon: 0.1,
            step_size: 0.1,
            steps: 1,
            random_start: false,
            bounds: (0.0, 1.0),
        };
        let adv = pgd_attack(&x, &cfg, &mut rng::stream(0, "a", 0), linear_loss(w.clone())).unwrap();
        assert!(is_feasible(&x, &adv, 0.1, (0.0, 1.0)));
        for ((&a, &xv), &wv) in adv.data().iter().zip(x.data()).zip(w.data()) {
            let exact = xv as f64 + 0.1f32 as f64 * wv.signum() as f64;
            // within one ulp of the real corner, on the feasible side
            assert!((a as f64 - exact).abs() <= (a.next_up() - a) as f64);
        }
    }

    #[test]
    fn pgd_reaches_best_grid_vertex_of_convex_quadratic() {
        // maximize (x - c)^2 summed: optimum is a corner of the box
        let mut r = rng::stream(2, "quad", 0);
        for _ in 0..20 {
            let x = Tensor::uniform(&[2], 0.3, 0.7, &mut r);
            let c = Tensor::uniform(&[2], 0.0, 1.0, &mut r);
            let eps = 0.1f32;
            let value = |p: &[f32]| -> f64 {
                p.iter().zip(c.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum()
            };
            let mut best = f64::NEG_INFINITY;
            let grid: Vec<f32> = (0..5).map(|k| -eps + k as f32 * eps / 2.0).collect();
            for &dx in &grid {
                for &dy in &grid {
                    best = best.max(value(&[x.data()[0] + dx, x.data()[1] + dy]));
                }
            }
            let cfg = AttackConfig {
                epsilon: eps,
                step_size: 0.05,
                steps: 10,
                random_start: false,
                bounds: (0.0, 1.0),
            };
            let cc = c.clone();
            let adv = pgd_attack(&x, &cfg, &mut rng::stream(0, "a", 0), move |tape, xv| {
                let cv = tape.constant(cc.clone());
                let d = tape.sub(xv, cv)?;
                let sq = tape.mul(d, d)?;
                tape.sum(sq)
            })
            .unwrap();
            assert!(value(adv.data()) >= best - 1e-6, "{} < {best}", value(adv.data()));
        }
    }

    #[test]
    fn nan_gradient_is_an_error() {
        let x = Tensor::from_slice(&[1], &[0.5]).unwrap();
        let cfg = AttackConfig {
            random_start: false,
            ..AttackConfig::eval()
        };
        let r = pgd_attack(&x, &cfg, &mut rng::stream(0, "a", 0), |tape, xv| {
            let nan = tape.constant(Tensor::scalar(f32::NAN));
            let p = tape.mul(xv, nan)?;
            tape.sum(p)
        });
        assert!(r.is_err());
    }

    #[test]
    fn random_start_is_seeded() {
        let x = Tensor::full(&[8], 0.5);
        let cfg = AttackConfig {
            steps: 0,
            ..AttackConfig::eval()
        };
        let f = || linear_loss(Tensor::ones(&[8]));
        let a = pgd_attack(&x, &cfg, &mut rng::stream(3, "a", 0), f()).unwrap();
        let b = pgd_attack(&x, &cfg, &mut rng::stream(3, "a", 0), f()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, x);
    }

    proptest! {
        #[test]
        fn always_feasible(seed in 0u64..10_000, eps in 0.0f32..0.3, steps in 0usize..4) {
            let mut r = rng::stream(seed, "fuzz", 0);
            let x = Tensor::uniform(&[6], 0.0, 1.0, &mut r);
            let w = Tensor::randn(&[6], 1.0, &mut r);
            let cfg = AttackConfig { epsilon: eps, step_size: 0.07, steps, random_start: true, bounds: (0.0, 1.0) };
            let adv = pgd_attack(&x, &cfg, &mut r, linear_loss(w)).unwrap();
            prop_assert!(is_feasible(&x, &adv, eps, (0.0, 1.0)));
        }
    }
}
