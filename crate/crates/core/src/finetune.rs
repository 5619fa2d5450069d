//! Supervised adversarial fine-tuning with the TRADES objective and the
//! (adversarial) linear-separability protocol on a frozen encoder.
//!
//! TRADES minimizes `CE(f(x), y) + beta * KL(softmax f(x) || softmax f(x'))`
//! where `x'` maximizes the KL term inside the attack budget.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adversary::{pgd_attack, AttackConfig};
use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, robust_accuracy, standard_accuracy, EvalReport, ModelScorer};
use crate::loss::{cross_entropy, kl_divergence};
use crate::nn::{BnMode, Bound, BranchMode, ModelParams, Trainable};
use crate::optim::{step_lr, Sgd};
use crate::pretrain::epoch_batches;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneMode {
    /// Whole network trained with TRADES.
    FullFinetune,
    /// Frozen encoder, linear layer trained with cross-entropy.
    LinearStandard,
    /// Frozen encoder, linear layer trained with TRADES.
    LinearAdversarial,
}

impl FinetuneMode {
    pub fn is_linear(self) -> bool {
        self != FinetuneMode::FullFinetune
    }

    pub fn is_adversarial(self) -> bool {
        self != FinetuneMode::LinearStandard
    }
}

impl fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FinetuneMode::FullFinetune => "full-finetune",
            FinetuneMode::LinearStandard => "linear-standard",
            FinetuneMode::LinearAdversarial => "linear-adversarial",
        })
    }
}

impl FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-finetune" | "full" => Ok(FinetuneMode::FullFinetune),
            "linear-standard" => Ok(FinetuneMode::LinearStandard),
            "linear-adversarial" => Ok(FinetuneMode::LinearAdversarial),
            other => Err(Error::Config(format!("unknown fine-tune mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    /// Weight of the robustness (KL) term.
    pub trades_beta: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Batch-norm branch whose parameters the classifier sits on.
    pub bn_branch: BranchMode,
    /// Attack generating the TRADES inner maximizer during training.
    pub attack: AttackConfig,
    /// Attack used to measure robust accuracy for selection and logging.
    pub eval_attack: AttackConfig,
    /// Stratified share of the training labels held out for model
    /// selection; `0` keeps the final model.
    pub val_fraction: f64,
    /// Evaluation points per epoch (`1` evaluates at epoch ends only).
    pub evals_per_epoch: usize,
    /// Also measure test TA/RA at every evaluation point.
    pub log_test: bool,
    pub seed: u64,
}

impl FinetuneConfig {
    /// Whole-network TRADES fine-tuning, 15 epochs with decay at 60% / 80%.
    pub fn desk_full(seed: u64) -> Self {
        FinetuneConfig {
            mode: FinetuneMode::FullFinetune,
            trades_beta: 6.0,
            epochs: 15,
            batch_size: 64,
            lr: 0.1,
            lr_milestones: vec![9, 12],
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            bn_branch: BranchMode::Adversarial,
            attack: AttackConfig::pretrain(),
            eval_attack: AttackConfig::eval(),
            val_fraction: 0.1,
            evals_per_epoch: 1,
            log_test: false,
            seed,
        }
    }

    /// Linear probe on frozen features, 5 epochs with decay after 3 and 4.
    pub fn desk_linear(adversarial: bool, seed: u64) -> Self {
        FinetuneConfig {
            mode: if adversarial {
                FinetuneMode::LinearAdversarial
            } else {
                FinetuneMode::LinearStandard
            },
            epochs: 5,
            lr_milestones: vec![3, 4],
            val_fraction: 0.0,
            ..FinetuneConfig::desk_full(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.trades_beta >= 0.0) {
            return Err(Error::Config(format!("trades_beta must be >= 0, got {}", self.trades_beta)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("fine-tune batch_size must be >= 2".into()));
        }
        if let Some(&m) = self.lr_milestones.iter().find(|&&m| self.epochs > 0 && m >= self.epochs) {
            return Err(Error::Config(format!(
                "lr milestone {m} is not before the last epoch ({})",
                self.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        if self.evals_per_epoch == 0 {
            return Err(Error::Config("evals_per_epoch must be >= 1".into()));
        }
        self.attack.validate()?;
        self.eval_attack.validate()
    }

    /// Branch used for every forward pass once the model is prepared.
    pub fn forward_branch(&self) -> BranchMode {
        if self.mode.is_linear() {
            self.bn_branch
        } else {
            BranchMode::Standard
        }
    }
}

/// Maximizes `KL(p(x) || p(x'))` with the clean prediction held fixed.
/// Batch norm runs in eval mode so attack steps never see batch statistics.
pub fn trades_attack(
    model: &ModelParams,
    x: &Tensor,
    branch: BranchMode,
    attack: &AttackConfig,
    rng: &mut rng::Rng,
) -> Result<Tensor> {
    let clean = model.predict(x, branch)?;
    let mut m = model.clone();
    pgd_attack(x, attack, rng, |tape, xv| {
        let bound = m.bind(tape, Trainable::NONE);
        let p = tape.constant(clean.clone());
        let q = m.logits(tape, &bound, xv, branch, BnMode::Eval)?;
        kl_divergence(tape, p, q)
    })
}

/// `CE(f(x), y) + beta * KL(softmax f(x) || softmax f(x_adv))` with both
/// forward passes recorded on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn trades_loss(
    model: &mut ModelParams,
    tape: &mut Tape,
    bound: &Bound,
    x: &Tensor,
    x_adv: &Tensor,
    labels: &[usize],
    beta: f32,
    branch: BranchMode,
    mode: BnMode,
) -> Result<Var> {
    let xv = tape.constant(x.clone());
    let clean = model.logits(tape, bound, xv, branch, mode)?;
    let ce = cross_entropy(tape, clean, labels)?;
    if beta == 0.0 {
        return Ok(ce);
    }
    let av = tape.constant(x_adv.clone());
    let adv = model.logits(tape, bound, av, branch, mode)?;
    trades_from_logits(tape, clean, adv, beta, ce)
}

fn trades_from_logits(tape: &mut Tape, clean: Var, adv: Var, beta: f32, ce: Var) -> Result<Var> {
    let kl = kl_divergence(tape, clean, adv)?;
    let kl = tape.scale(kl, beta)?;
    tape.add(ce, kl)
}

/// TRADES objective on precomputed logits, for checking the formula.
pub fn trades_from_fixed_logits(clean: &Tensor, adv: &Tensor, labels: &[usize], beta: f32) -> Result<f32> {
    let mut tape = Tape::new();
    let c = tape.constant(clean.clone());
    let a = tape.constant(adv.clone());
    let ce = cross_entropy(&mut tape, c, labels)?;
    let l = trades_from_logits(&mut tape, c, a, beta, ce)?;
    tape.scalar_value(l)
}

/// One evaluation point of a fine-tuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    /// Fractional epochs completed.
    pub epoch: f64,
    pub step: usize,
    pub lr: f32,
    /// Mean training loss since the previous point (`NaN` at the start).
    pub loss: f32,
    pub val_ta: Option<f64>,
    pub val_ra: Option<f64>,
    pub test_ta: Option<f64>,
    pub test_ra: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// The selected model (best validation RA, or the final one).
    pub model: ModelParams,
    /// Epoch position of the selected model.
    pub selected_epoch: f64,
    pub history: Vec<FinetuneRecord>,
    /// Test-set report of the selected model, when a test set was given.
    pub report: Option<EvalReport>,
}

impl FinetuneOutcome {
    pub fn ta(&self) -> Option<f64> {
        self.report.as_ref().map(|r| r.ta)
    }

    pub fn ra(&self) -> Option<f64> {
        self.report.as_ref().map(|r| r.ra)
    }
}

/// First logged position whose test RA reaches `target`.
pub fn epochs_to_reach(history: &[FinetuneRecord], target: f64) -> Option<f64> {
    history
        .iter()
        .filter(|r| r.epoch > 0.0)
        .find(|r| r.test_ra.is_some_and(|ra| ra >= target))
        .map(|r| r.epoch)
}

/// Prepares the network for the configured mode: full fine-tuning collapses
/// batch norm to the chosen branch; every mode starts from a zero classifier.
pub fn prepare(pretrained: &ModelParams, cfg: &FinetuneConfig) -> ModelParams {
    let mut model = pretrained.clone();
    if !cfg.mode.is_linear() {
        model.collapse_bn(cfg.bn_branch);
    }
    model.reset_classifier();
    model
}

fn check_compatible(model: &ModelParams, data: &Dataset) -> Result<()> {
    let c = model.config();
    let (ch, h, w) = data.image_shape();
    if ch != c.in_channels || h != c.resolution || w != c.resolution || data.num_classes() != c.num_classes {
        return Err(Error::Config(format!(
            "model expects {}x{}x{} images and {} classes, data has {ch}x{h}x{w} and {}",
            c.in_channels,
            c.resolution,
            c.resolution,
            c.num_classes,
            data.num_classes()
        )));
    }
    Ok(())
}

/// Trains from `pretrained` on `train` and, if `test` is given, reports the
/// selected model's TA/RA on it. `on_record` sees every evaluation point.
pub fn finetune(
    pretrained: &ModelParams,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &FinetuneConfig,
    mut on_record: impl FnMut(&FinetuneRecord),
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    check_compatible(pretrained, train)?;
    if let Some(t) = test {
        check_compatible(pretrained, t)?;
    }
    if train.is_empty() {
        return Err(Error::Input("fine-tuning dataset is empty".into()));
    }
    let (fit, val) = if cfg.val_fraction > 0.0 {
        let (v, f) = train.stratified_indices(cfg.val_fraction, cfg.seed, "finetune-val")?;
        (train.subset(&f)?, Some(train.subset(&v)?))
    } else {
        (train.clone(), None)
    };
    let mut model = prepare(pretrained, cfg);
    let branch = cfg.forward_branch();
    let (trainable, bn_mode) = if cfg.mode.is_linear() {
        (Trainable::LINEAR, BnMode::Eval)
    } else {
        (Trainable::FINETUNE, BnMode::Train)
    };
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);

    let measure = |m: &ModelParams, epoch: f64, step: usize, lr: f32, loss: f32| -> Result<FinetuneRecord> {
        let s = ModelScorer::new(m, branch);
        let seed = rng::derive_seed(cfg.seed, "finetune-eval", 0);
        let (val_ta, val_ra) = match &val {
            Some(v) => (
                Some(standard_accuracy(&s, v)?),
                Some(robust_accuracy(&s, v, &cfg.eval_attack, seed)?),
            ),
            None => (None, None),
        };
        let (test_ta, test_ra) = match test {
            Some(t) if cfg.log_test => (
                Some(standard_accuracy(&s, t)?),
                Some(robust_accuracy(&s, t, &cfg.eval_attack, seed)?),
            ),
            _ => (None, None),
        };
        Ok(FinetuneRecord {
            epoch,
            step,
            lr,
            loss,
            val_ta,
            val_ra,
            test_ta,
            test_ra,
        })
    };

    let mut history = Vec::new();
    let first = measure(&model, 0.0, 0, cfg.lr, f32::NAN)?;
    on_record(&first);
    history.push(first);
    let mut best: Option<(f64, f64, ModelParams)> = None;

    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = step_lr(cfg.lr, epoch, &cfg.lr_milestones, cfg.lr_decay);
        let batches = epoch_batches(fit.len(), cfg.batch_size, cfg.seed, "finetune-order", epoch);
        let nb = batches.len();
        let marks: Vec<usize> = (1..=cfg.evals_per_epoch)
            .map(|k| (k * nb).div_ceil(cfg.evals_per_epoch))
            .collect();
        let (mut sum, mut count) = (0.0f64, 0usize);
        for (b, idx) in batches.iter().enumerate() {
            let (x, y) = fit.batch(idx)?;
            let mut r = rng::stream(cfg.seed, "finetune-step", step as u64);
            let x_adv = if cfg.mode.is_adversarial() && cfg.trades_beta > 0.0 {
                trades_attack(&model, &x, branch, &cfg.attack, &mut r)?
            } else {
                x.clone()
            };
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, trainable);
            let loss = if cfg.mode.is_adversarial() {
                trades_loss(&mut model, &mut tape, &bound, &x, &x_adv, &y, cfg.trades_beta, branch, bn_mode)?
            } else {
                let xv = tape.constant(x.clone());
                let logits = model.logits(&mut tape, &bound, xv, branch, bn_mode)?;
                cross_entropy(&mut tape, logits, &y)?
            };
            let value = tape.scalar_value(loss)?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    reason: "non-finite fine-tuning loss".into(),
                    last_good: best.map(|b| Box::new(b.2)),
                });
            }
            tape.backward(loss)?;
            opt.step(model.learnables_mut(), &bound.gradients(&tape), lr)?;
            sum += value as f64;
            count += 1;
            step += 1;
            if let Some(k) = marks.iter().position(|&m| m == b + 1) {
                let pos = epoch as f64 + (k + 1) as f64 / cfg.evals_per_epoch as f64;
                let rec = measure(&model, pos, step, lr, (sum / count.max(1) as f64) as f32)?;
                sum = 0.0;
                count = 0;
                log::info!("finetune {pos:.2}: loss {:.4} val_ra {:?} test_ra {:?}", rec.loss, rec.val_ra, rec.test_ra);
                on_record(&rec);
                if let Some(vr) = rec.val_ra {
                    if best.as_ref().is_none_or(|b| vr > b.1) {
                        best = Some((pos, vr, model.clone()));
                    }
                }
                history.push(rec);
            }
        }
    }
    let (selected_epoch, model) = match best {
        Some((pos, _, m)) => (pos, m),
        None => (cfg.epochs as f64, model),
    };
    let report = match test {
        Some(t) => Some(evaluate(
            &ModelScorer::new(&model, branch),
            t,
            &cfg.eval_attack,
            None,
            rng::derive_seed(cfg.seed, "finetune-eval", 0),
        )?),
        None => None,
    };
    Ok(FinetuneOutcome {
        model,
        selected_epoch,
        history,
        report,
    })
}

/// Full-network TRADES fine-tuning.
pub fn adversarial_finetune(
    pretrained: &ModelParams,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &FinetuneConfig,
    on_record: impl FnMut(&FinetuneRecord),
) -> Result<FinetuneOutcome> {
    if cfg.mode != FinetuneMode::FullFinetune {
        return Err(Error::Config(format!("adversarial_finetune needs full-finetune mode, got {}", cfg.mode)));
    }
    finetune(pretrained, train, test, cfg, on_record)
}

/// Linear classifier on the frozen encoder.
pub fn linear_eval(
    pretrained: &ModelParams,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &FinetuneConfig,
    on_record: impl FnMut(&FinetuneRecord),
) -> Result<FinetuneOutcome> {
    if !cfg.mode.is_linear() {
        return Err(Error::Config(format!("linear_eval needs a linear mode, got {}", cfg.mode)));
    }
    finetune(pretrained, train, test, cfg, on_record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, SyntheticSpec};
    use crate::nn::EncoderConfig;

    fn setup() -> (ModelParams, Dataset, Dataset) {
        let spec = SyntheticSpec {
            resolution: 8,
            train_size: 40,
            test_size: 20,
            ..SyntheticSpec::desk()
        };
        let (train, test) = synthetic(&spec).unwrap();
        let cfg = EncoderConfig {
            widths: vec![4, 8],
            proj_dim: 8,
            ..EncoderConfig::desk(8, 2)
        };
        (ModelParams::init(&cfg, 3).unwrap(), train, test)
    }

    fn quick(mode: FinetuneMode) -> FinetuneConfig {
        FinetuneConfig {
            mode,
            epochs: 2,
            batch_size: 16,
            lr_milestones: vec![1],
            attack: AttackConfig::pretrain().with_steps(2),
            eval_attack: AttackConfig::eval().with_steps(3),
            ..FinetuneConfig::desk_full(1)
        }
    }

    #[test]
    fn trades_formula_oracle() {
        let clean = Tensor::from_slice(&[1, 2], &[1.0, -1.0]).unwrap();
        let adv = Tensor::from_slice(&[1, 2], &[0.5, 0.5]).unwrap();
        let got = trades_from_fixed_logits(&clean, &adv, &[0], 6.0).unwrap() as f64;
        let p0 = 1.0 / (1.0 + (-2.0f64).exp());
        let ce = -p0.ln();
        let kl = p0 * (p0 / 0.5).ln() + (1.0 - p0) * ((1.0 - p0) / 0.5).ln();
        assert!((got - (ce + 6.0 * kl)).abs() < 1e-6);
        let ce_only = trades_from_fixed_logits(&clean, &adv, &[0], 0.0).unwrap() as f64;
        assert!((ce_only - ce).abs() < 1e-6);
        // non-decreasing in beta at a fixed point
        let mut prev = f32::NEG_INFINITY;
        for b in [0.0, 0.5, 1.0, 6.0] {
            let v = trades_from_fixed_logits(&clean, &adv, &[0], b).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn zero_budget_trades_is_cross_entropy() {
        let (mut model, train, _) = setup();
        model.classifier.weight = Tensor::randn(&[8, 2], 1.0, &mut rng::stream(0, "w", 0));
        let (x, y) = train.batch(&[0, 1, 2, 3]).unwrap();
        let attack = AttackConfig::pretrain().with_epsilon(0.0);
        let x_adv = trades_attack(&model, &x, BranchMode::Standard, &attack, &mut rng::stream(0, "a", 0)).unwrap();
        assert_eq!(x_adv, x);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, Trainable::FINETUNE);
        let t = trades_loss(&mut model, &mut tape, &bound, &x, &x_adv, &y, 6.0, BranchMode::Standard, BnMode::Eval).unwrap();
        let xv = tape.constant(x.clone());
        let l = model.logits(&mut tape, &bound, xv, BranchMode::Standard, BnMode::Eval).unwrap();
        let ce = cross_entropy(&mut tape, l, &y).unwrap();
        assert!((tape.scalar_value(t).unwrap() - tape.scalar_value(ce).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn zero_epochs_gives_uniform_classifier() {
        let (model, train, test) = setup();
        let cfg = FinetuneConfig {
            epochs: 0,
            lr_milestones: vec![],
            ..quick(FinetuneMode::FullFinetune)
        };
        let out = adversarial_finetune(&model, &train, Some(&test), &cfg, |_| {}).unwrap();
        assert_eq!(out.ta(), Some(0.5));
        assert_eq!(out.ra(), Some(0.5));
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn finetune_is_deterministic_and_logs_fractional_points() {
        let (model, train, test) = setup();
        let cfg = FinetuneConfig {
            evals_per_epoch: 2,
            log_test: true,
            ..quick(FinetuneMode::FullFinetune)
        };
        let a = adversarial_finetune(&model, &train, Some(&test), &cfg, |_| {}).unwrap();
        let b = adversarial_finetune(&model, &train, Some(&test), &cfg, |_| {}).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.report, b.report);
        let epochs: Vec<f64> = a.history.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert!(!a.model.config().dual_bn);
    }

    #[test]
    fn linear_eval_freezes_encoder() {
        let (model, train, test) = setup();
        for mode in [FinetuneMode::LinearStandard, FinetuneMode::LinearAdversarial] {
            let out = linear_eval(&model, &train, Some(&test), &quick(mode), |_| {}).unwrap();
            assert_eq!(out.model.blocks, model.blocks);
            assert_eq!(out.model.head, model.head);
            assert_ne!(out.model.classifier, model.classifier);
        }
        assert!(linear_eval(&model, &train, None, &quick(FinetuneMode::FullFinetune), |_| {}).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = quick(FinetuneMode::FullFinetune);
        c.lr_milestones = vec![2];
        assert!(c.validate().is_err());
        c.lr_milestones = vec![];
        c.trades_beta = -1.0;
        assert!(c.validate().is_err());
        let (model, _, _) = setup();
        let other = synthetic(&SyntheticSpec {
            train_size: 4,
            test_size: 2,
            ..SyntheticSpec::desk()
        })
        .unwrap()
        .0;
        assert!(adversarial_finetune(&model, &other, None, &quick(FinetuneMode::FullFinetune), |_| {}).is_err());
    }
}
