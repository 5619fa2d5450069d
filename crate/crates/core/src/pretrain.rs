//! Contrastive pretraining with the four view-pairing strategies.
//!
//! * `S2S`: two standard views through the standard batch-norm branch.
//! * `A2A`: two jointly attacked views through the adversarial branch.
//! * `A2S`: an attacked first view (adversarial branch) against a clean
//!   second view (standard branch).
//! * `DS`: the S2S term plus `ds_weight` times the A2A term, so the shared
//!   convolution weights receive gradients from both streams while each
//!   stream normalizes with its own batch-norm branch.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adversary::{joint_contrastive_attack, pgd_attack, AttackConfig};
use crate::augment::{sample_view_pair, AugmentConfig};
use crate::autodiff::{Tape, Var};
use crate::contrastive::{interleave, interleave_tensors, nt_xent, ContrastiveConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{BnMode, Bound, BranchMode, ModelParams, Trainable};
use crate::optim::{cosine_lr, Sgd};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    S2S,
    A2A,
    A2S,
    DS,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::S2S, Variant::A2A, Variant::A2S, Variant::DS];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::S2S => "s2s",
            Variant::A2A => "a2a",
            Variant::A2S => "a2s",
            Variant::DS => "ds",
        }
    }

    pub fn is_adversarial(self) -> bool {
        self != Variant::S2S
    }

    /// Batch-norm branch used downstream: the adversarial one whenever it
    /// was trained, otherwise the standard one.
    pub fn eval_branch(self) -> BranchMode {
        if self.is_adversarial() {
            BranchMode::Adversarial
        } else {
            BranchMode::Standard
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s2s" => Ok(Variant::S2S),
            "a2a" => Ok(Variant::A2A),
            "a2s" => Ok(Variant::A2S),
            "ds" => Ok(Variant::DS),
            other => Err(Error::Config(format!("unknown variant `{other}` (s2s|a2a|a2s|ds)"))),
        }
    }
}

/// SGD with momentum and a learning rate scaled linearly with batch size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    /// Learning rate at `reference_batch`.
    pub base_lr: f32,
    pub reference_batch: usize,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 0.5,
            reference_batch: 512,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl OptimConfig {
    pub fn lr_for_batch(&self, batch: usize) -> f32 {
        self.base_lr * batch as f32 / self.reference_batch as f32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub variant: Variant,
    /// Weight of the adversarial stream in `DS`.
    pub ds_weight: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub contrastive: ContrastiveConfig,
    pub attack: AttackConfig,
    /// `None` uses the default family for the model resolution.
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
}

impl PretrainConfig {
    /// Small-scale schedule: 30 epochs at batch 32, four times the linearly
    /// scaled learning rate, the adversarial stream of `DS` at half weight
    /// and half the usual attack budget. A tiny encoder at init is so
    /// fragile that the full budget pushes the attacked contrastive loss
    /// above its value for collapsed embeddings, which then becomes the
    /// easiest way to lower it.
    pub fn desk(variant: Variant, seed: u64) -> Self {
        PretrainConfig {
            variant,
            ds_weight: 0.5,
            epochs: 30,
            batch_size: 32,
            optim: OptimConfig {
                base_lr: 2.0,
                ..OptimConfig::default()
            },
            contrastive: ContrastiveConfig::default(),
            attack: AttackConfig {
                epsilon: 4.0 / 255.0,
                step_size: 1.0 / 255.0,
                ..AttackConfig::pretrain()
            },
            augment: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ds_weight >= 0.0) {
            return Err(Error::Config(format!("ds_weight must be >= 0, got {}", self.ds_weight)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        self.contrastive.validate()?;
        self.attack.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    pub fn augment_for(&self, resolution: usize) -> AugmentConfig {
        self.augment
            .clone()
            .unwrap_or_else(|| AugmentConfig::for_resolution(resolution))
    }
}

/// Augmented view pairs for one minibatch, interleaved so rows `2k` and
/// `2k + 1` are the two views of clean image `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub clean: Tensor,
    pub standard: Tensor,
    /// Attacked views in the same layout. For `A2S` only the even rows are
    /// perturbed; the odd rows equal the standard views.
    pub adversarial: Option<Tensor>,
}

impl ViewBatch {
    /// Draws one view pair per clean `[n, c, h, w]` image.
    pub fn augment(clean: &Tensor, cfg: &AugmentConfig, rng: &mut rng::Rng) -> Result<ViewBatch> {
        let n = clean.shape()[0];
        let mut first = Vec::with_capacity(n);
        let mut second = Vec::with_capacity(n);
        let item: Vec<usize> = clean.shape()[1..].to_vec();
        for k in 0..n {
            let img = clean.slice_leading(k, k + 1)?.reshape(&item)?;
            let (a, b) = sample_view_pair(&img, cfg, rng);
            first.push(a);
            second.push(b);
        }
        let a = Tensor::stack_leading(&first.iter().collect::<Vec<_>>())?.reshape(clean.shape())?;
        let b = Tensor::stack_leading(&second.iter().collect::<Vec<_>>())?.reshape(clean.shape())?;
        Ok(ViewBatch {
            clean: clean.clone(),
            standard: interleave_tensors(&a, &b)?,
            adversarial: None,
        })
    }

    pub fn pairs(&self) -> usize {
        self.clean.shape()[0]
    }

    fn adversarial(&self) -> Result<&Tensor> {
        self.adversarial
            .as_ref()
            .ok_or_else(|| Error::Input("view batch has no adversarial views".into()))
    }
}

fn even_odd(n2: usize) -> (Vec<usize>, Vec<usize>) {
    ((0..n2).step_by(2).collect(), (1..n2).step_by(2).collect())
}

/// Contrastive loss with the first view of each pair through the adversarial
/// branch and the second through the standard branch.
fn mixed_pair_loss(
    model: &mut ModelParams,
    tape: &mut Tape,
    bound: &Bound,
    first: Var,
    second: Var,
    temperature: f32,
    mode: BnMode,
) -> Result<Var> {
    let zi = model.embed(tape, bound, first, BranchMode::Adversarial, mode)?;
    let zj = model.embed(tape, bound, second, BranchMode::Standard, mode)?;
    let z = interleave(tape, zi, zj)?;
    nt_xent(tape, z, temperature)
}

/// One contrastive stream over interleaved views through a single branch.
pub fn stream_loss(
    model: &mut ModelParams,
    tape: &mut Tape,
    bound: &Bound,
    views: &Tensor,
    branch: BranchMode,
    temperature: f32,
    mode: BnMode,
) -> Result<Var> {
    let x = tape.constant(views.clone());
    let z = model.embed(tape, bound, x, branch, mode)?;
    nt_xent(tape, z, temperature)
}

/// The variant's training objective on an already attacked batch.
pub fn pretrain_objective(
    model: &mut ModelParams,
    tape: &mut Tape,
    bound: &Bound,
    batch: &ViewBatch,
    cfg: &PretrainConfig,
    mode: BnMode,
) -> Result<Var> {
    let tau = cfg.contrastive.temperature;
    match cfg.variant {
        Variant::S2S => stream_loss(model, tape, bound, &batch.standard, BranchMode::Standard, tau, mode),
        Variant::A2A => stream_loss(model, tape, bound, batch.adversarial()?, BranchMode::Adversarial, tau, mode),
        Variant::A2S => {
            let (even, odd) = even_odd(batch.standard.shape()[0]);
            let first = tape.constant(batch.adversarial()?.select_leading(&even)?);
            let second = tape.constant(batch.standard.select_leading(&odd)?);
            mixed_pair_loss(model, tape, bound, first, second, tau, mode)
        }
        Variant::DS => {
            let s = stream_loss(model, tape, bound, &batch.standard, BranchMode::Standard, tau, mode)?;
            let a = stream_loss(model, tape, bound, batch.adversarial()?, BranchMode::Adversarial, tau, mode)?;
            let a = tape.scale(a, cfg.ds_weight)?;
            tape.add(s, a)
        }
    }
}

/// Fills `batch.adversarial` as the variant requires. The attack uses batch
/// statistics of the adversarial branch without touching running averages.
pub fn attack_views(model: &mut ModelParams, batch: &mut ViewBatch, cfg: &PretrainConfig, rng: &mut rng::Rng) -> Result<()> {
    let tau = cfg.contrastive.temperature;
    batch.adversarial = match cfg.variant {
        Variant::S2S => None,
        Variant::A2A | Variant::DS => Some(joint_contrastive_attack(
            model,
            &batch.standard,
            BranchMode::Adversarial,
            &cfg.attack,
            tau,
            rng,
        )?),
        Variant::A2S => {
            let (even, odd) = even_odd(batch.standard.shape()[0]);
            let first = batch.standard.select_leading(&even)?;
            let second = batch.standard.select_leading(&odd)?;
            let attacked = pgd_attack(&first, &cfg.attack, rng, |tape, xv| {
                let bound = model.bind(tape, Trainable::NONE);
                let sv = tape.constant(second.clone());
                mixed_pair_loss(model, tape, &bound, xv, sv, tau, BnMode::Frozen)
            })?;
            Some(interleave_tensors(&attacked, &second)?)
        }
    };
    Ok(())
}

/// Attacks the batch if needed, then takes one SGD step on the objective.
/// Returns the loss before the update.
pub fn pretrain_step(
    model: &mut ModelParams,
    opt: &mut Sgd,
    batch: &mut ViewBatch,
    cfg: &PretrainConfig,
    lr: f32,
    rng: &mut rng::Rng,
) -> Result<f32> {
    if batch.pairs() < 2 {
        return Err(Error::Input(format!("pretrain_step needs >= 2 images, got {}", batch.pairs())));
    }
    attack_views(model, batch, cfg, rng)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Trainable::PRETRAIN);
    let loss = pretrain_objective(model, &mut tape, &bound, batch, cfg, BnMode::Train)?;
    let value = tape.scalar_value(loss)?;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "pretrain loss" });
    }
    tape.backward(loss)?;
    let grads = bound.gradients(&tape);
    if grads.iter().flatten().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite { op: "pretrain gradient" });
    }
    opt.step(model.learnables_mut(), &grads, lr)?;
    Ok(value)
}

/// One row of the pretraining metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub variant: Variant,
    /// Mean minibatch loss over the epoch.
    pub loss: f32,
    /// Learning rate of the epoch's last step.
    pub lr: f32,
    pub wallclock: f64,
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub model: ModelParams,
    pub history: Vec<PretrainEpoch>,
}

/// Minibatch index lists for one epoch. A trailing batch with fewer than two
/// images is dropped since it has no negatives.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, tag: &str, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, tag, epoch as u64));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

/// Pretrains `model` on the images of `dataset` (labels are ignored).
/// On a non-finite loss the error carries the parameters from the end of
/// the last completed epoch.
pub fn run_pretraining(
    dataset: &Dataset,
    mut model: ModelParams,
    cfg: &PretrainConfig,
    mut on_epoch: impl FnMut(&PretrainEpoch),
) -> Result<Pretrained> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("pretraining dataset is empty".into()));
    }
    let aug = cfg.augment_for(model.config().resolution);
    let base_lr = cfg.optim.lr_for_batch(cfg.batch_size);
    let per_epoch = epoch_batches(dataset.len(), cfg.batch_size, cfg.seed, "pretrain-order", 0).len();
    let total = per_epoch * cfg.epochs;
    let mut opt = Sgd::new(cfg.optim.momentum, cfg.optim.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut last_good = model.clone();
    let start = Instant::now();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0f64;
        let mut lr = base_lr;
        let batches = epoch_batches(dataset.len(), cfg.batch_size, cfg.seed, "pretrain-order", epoch);
        for idx in &batches {
            lr = cosine_lr(base_lr, step, total);
            let mut r = rng::stream(cfg.seed, "pretrain-step", step as u64);
            let (clean, _) = dataset.batch(idx)?;
            let outcome = ViewBatch::augment(&clean, &aug, &mut r)
                .and_then(|mut vb| pretrain_step(&mut model, &mut opt, &mut vb, cfg, lr, &mut r));
            match outcome {
                Ok(l) => sum += l as f64,
                Err(e @ Error::NonFinite { .. }) => {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        reason: e.to_string(),
                        last_good: Some(Box::new(last_good)),
                    })
                }
                Err(e) => return Err(e),
            }
            step += 1;
        }
        let record = PretrainEpoch {
            epoch,
            variant: cfg.variant,
            loss: (sum / batches.len().max(1) as f64) as f32,
            lr,
            wallclock: start.elapsed().as_secs_f64(),
        };
        log::info!("pretrain {} epoch {epoch}: loss {:.4}", cfg.variant, record.loss);
        on_epoch(&record);
        history.push(record);
        last_good = model.clone();
    }
    Ok(Pretrained { model, history })
}

/// Objective value on a batch without updating anything.
pub fn objective_value(model: &ModelParams, batch: &ViewBatch, cfg: &PretrainConfig, mode: BnMode) -> Result<f32> {
    let mut m = model.clone();
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, Trainable::NONE);
    let l = pretrain_objective(&mut m, &mut tape, &bound, batch, cfg, mode)?;
    tape.scalar_value(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, SyntheticSpec};
    use crate::nn::EncoderConfig;

    fn tiny_model(seed: u64) -> ModelParams {
        let cfg = EncoderConfig {
            widths: vec![4, 8],
            proj_dim: 8,
            ..EncoderConfig::desk(8, 2)
        };
        ModelParams::init(&cfg, seed).unwrap()
    }

    fn tiny_batch(seed: u64) -> ViewBatch {
        let clean = Tensor::uniform(&[4, 3, 8, 8], 0.0, 1.0, &mut rng::stream(seed, "clean", 0));
        ViewBatch::augment(&clean, &AugmentConfig::for_resolution(8), &mut rng::stream(seed, "aug", 0)).unwrap()
    }

    fn cfg(variant: Variant) -> PretrainConfig {
        PretrainConfig {
            ds_weight: 1.0,
            attack: AttackConfig::pretrain().with_steps(2),
            ..PretrainConfig::desk(variant, 0)
        }
    }

    #[test]
    fn ds_is_sum_of_streams_with_shared_delta() {
        let model = tiny_model(1);
        let mut batch = tiny_batch(1);
        let c = cfg(Variant::DS);
        attack_views(&mut model.clone(), &mut batch, &c, &mut rng::stream(0, "atk", 0)).unwrap();
        let ds = objective_value(&model, &batch, &c, BnMode::Frozen).unwrap();
        let s = objective_value(&model, &batch, &cfg(Variant::S2S), BnMode::Frozen).unwrap();
        let a = objective_value(&model, &batch, &cfg(Variant::A2A), BnMode::Frozen).unwrap();
        assert!((ds - (s + a)).abs() < 1e-6, "{ds} vs {s} + {a}");
    }

    #[test]
    fn zero_budget_reductions() {
        let model = tiny_model(2);
        let mut batch = tiny_batch(2);
        let mut c = cfg(Variant::DS);
        c.attack.epsilon = 0.0;
        attack_views(&mut model.clone(), &mut batch, &c, &mut rng::stream(0, "atk", 0)).unwrap();
        assert_eq!(batch.adversarial.as_ref(), Some(&batch.standard));
        let ds = objective_value(&model, &batch, &c, BnMode::Eval).unwrap();
        let s = objective_value(&model, &batch, &cfg(Variant::S2S), BnMode::Eval).unwrap();
        assert!((ds - 2.0 * s).abs() < 1e-6);
        let a2a = objective_value(&model, &batch, &cfg(Variant::A2A), BnMode::Train).unwrap();
        let mut m = model.clone();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, Trainable::NONE);
        let v = stream_loss(&mut m, &mut tape, &bound, &batch.standard, BranchMode::Adversarial, 0.5, BnMode::Train).unwrap();
        assert!((a2a - tape.scalar_value(v).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn a2s_perturbs_only_first_views() {
        let mut model = tiny_model(3);
        let mut batch = tiny_batch(3);
        let c = cfg(Variant::A2S);
        attack_views(&mut model, &mut batch, &c, &mut rng::stream(0, "atk", 0)).unwrap();
        let adv = batch.adversarial.as_ref().unwrap();
        let (even, odd) = even_odd(8);
        assert_eq!(adv.select_leading(&odd).unwrap(), batch.standard.select_leading(&odd).unwrap());
        assert_ne!(adv.select_leading(&even).unwrap(), batch.standard.select_leading(&even).unwrap());
        assert!(crate::adversary::is_feasible(&batch.standard, adv, c.attack.epsilon, (0.0, 1.0)));
    }

    #[test]
    fn branch_statistics_untouched_by_other_stream() {
        for (variant, untouched) in [(Variant::S2S, BranchMode::Adversarial), (Variant::A2A, BranchMode::Standard)] {
            let mut model = tiny_model(4);
            let before = model.clone();
            let mut opt = Sgd::new(0.9, 5e-4);
            let c = cfg(variant);
            for s in 0..3 {
                let mut b = tiny_batch(10 + s);
                pretrain_step(&mut model, &mut opt, &mut b, &c, 0.05, &mut rng::stream(0, "s", s)).unwrap();
            }
            for (a, b) in model.blocks.iter().zip(&before.blocks) {
                assert_eq!(a.bn.state(untouched), b.bn.state(untouched));
                assert_ne!(a.weight, b.weight);
            }
        }
    }

    #[test]
    fn one_batch_one_step_and_determinism() {
        let spec = SyntheticSpec {
            resolution: 8,
            train_size: 6,
            test_size: 2,
            ..SyntheticSpec::desk()
        };
        let (train, _) = synthetic(&spec).unwrap();
        let c = PretrainConfig {
            epochs: 1,
            batch_size: 8,
            ..cfg(Variant::DS)
        };
        let mut rows = 0;
        let a = run_pretraining(&train, tiny_model(5), &c, |_| rows += 1).unwrap();
        assert_eq!(rows, 1);
        assert_eq!(a.history.len(), 1);
        let b = run_pretraining(&train, tiny_model(5), &c, |_| {}).unwrap();
        assert_eq!(a.model, b.model);
        assert_ne!(a.model, tiny_model(5));
    }

    #[test]
    fn nan_aborts_with_last_good() {
        let spec = SyntheticSpec {
            resolution: 8,
            train_size: 8,
            test_size: 2,
            ..SyntheticSpec::desk()
        };
        let (train, _) = synthetic(&spec).unwrap();
        let mut model = tiny_model(6);
        model.head.w2.data_mut()[0] = f32::NAN;
        let c = PretrainConfig {
            epochs: 1,
            batch_size: 4,
            ..cfg(Variant::S2S)
        };
        match run_pretraining(&train, model.clone(), &c, |_| {}) {
            Err(Error::Diverged { last_good, epoch, step, .. }) => {
                assert_eq!((epoch, step), (0, 0));
                let bits = |m: &ModelParams| -> Vec<u32> {
                    m.named_tensors().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
                };
                assert_eq!(bits(&last_good.unwrap()), bits(&model));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn variant_parsing() {
        for v in Variant::ALL {
            assert_eq!(v.tag().parse::<Variant>().unwrap(), v);
        }
        assert!("x2y".parse::<Variant>().is_err());
    }
}
