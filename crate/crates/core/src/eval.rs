//! Standard accuracy, robust accuracy under random-start PGD, and accuracy
//! under Gaussian pixel noise.
//!
//! Examples are scored in fixed-size chunks that may run in parallel. Every
//! example's randomness comes from its own stream derived from
//! `(seed, index)`, and eval-mode inference treats rows independently, so
//! results do not depend on chunking or thread count.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adversary::{pgd_attack_from, random_start, AttackConfig};
use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::loss::cross_entropy_sum;
use crate::nn::{BnMode, BranchMode, ModelParams, Trainable};
use crate::rng;
use crate::tensor::Tensor;

const CHUNK: usize = 32;

/// Default standard deviation of the Gaussian-noise probe.
pub const DEFAULT_NOISE_SIGMA: f32 = 0.05;

/// Anything that maps an image batch to logits on a tape.
pub trait Scorer: Sync {
    fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var>;
}

/// A model evaluated in eval mode through one batch-norm branch.
#[derive(Clone, Copy, Debug)]
pub struct ModelScorer<'a> {
    pub model: &'a ModelParams,
    pub branch: BranchMode,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a ModelParams, branch: BranchMode) -> Self {
        ModelScorer { model, branch }
    }
}

impl Scorer for ModelScorer<'_> {
    fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        // eval mode never touches the running statistics
        let mut m = self.model.clone();
        let bound = m.bind(tape, Trainable::NONE);
        m.logits(tape, &bound, x, self.branch, BnMode::Eval)
    }
}

fn predict<S: Scorer + ?Sized>(scorer: &S, x: &Tensor) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let l = scorer.logits(&mut tape, xv)?;
    tape.value(l).argmax_rows()
}

/// Applies `score_chunk` to consecutive index ranges and returns the fraction
/// of correct predictions.
fn chunked_accuracy<F>(data: &Dataset, score_chunk: F) -> Result<f64>
where
    F: Fn(&[usize], &Tensor, &[usize]) -> Result<Vec<usize>> + Sync + Send,
{
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let n = data.len();
    let chunks = n.div_ceil(CHUNK);
    let results = exec::map_indexed(chunks, |c| -> Result<usize> {
        let idx: Vec<usize> = (c * CHUNK..((c + 1) * CHUNK).min(n)).collect();
        let (x, y) = data.batch(&idx)?;
        let pred = score_chunk(&idx, &x, &y)?;
        Ok(pred.iter().zip(&y).filter(|(p, t)| p == t).count())
    });
    let mut correct = 0usize;
    for r in results {
        correct += r?;
    }
    Ok(correct as f64 / n as f64)
}

/// Fraction of argmax predictions equal to the label (ties go to the lowest
/// class index).
pub fn standard_accuracy<S: Scorer + ?Sized>(scorer: &S, data: &Dataset) -> Result<f64> {
    chunked_accuracy(data, |_, x, _| predict(scorer, x))
}

/// Attacks a chunk against the summed cross-entropy of its true labels.
/// Each example starts from its own random point drawn from `(seed, index)`.
pub fn attack_chunk<S: Scorer + ?Sized>(
    scorer: &S,
    x: &Tensor,
    labels: &[usize],
    indices: &[usize],
    attack: &AttackConfig,
    seed: u64,
) -> Result<Tensor> {
    let start = if attack.random_start {
        let rows: Vec<Tensor> = indices
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let row = x.slice_leading(k, k + 1)?;
                random_start(&row, attack, &mut rng::stream(seed, "eval-start", i as u64))
            })
            .collect::<Result<_>>()?;
        Tensor::stack_leading(&rows.iter().collect::<Vec<_>>())?
    } else {
        x.clone()
    };
    pgd_attack_from(x, &start, attack, |tape, xv| {
        let l = scorer.logits(tape, xv)?;
        cross_entropy_sum(tape, l, labels)
    })
}

/// Accuracy on PGD-perturbed inputs. With `epsilon = 0` this equals
/// [`standard_accuracy`] exactly.
pub fn robust_accuracy<S: Scorer + ?Sized>(scorer: &S, data: &Dataset, attack: &AttackConfig, seed: u64) -> Result<f64> {
    attack.validate()?;
    chunked_accuracy(data, |idx, x, y| {
        let adv = attack_chunk(scorer, x, y, idx, attack, seed)?;
        predict(scorer, &adv)
    })
}

/// Accuracy on `x + N(0, sigma^2)` clamped to `[0, 1]`.
pub fn gaussian_noise_accuracy<S: Scorer + ?Sized>(scorer: &S, data: &Dataset, sigma: f32, seed: u64) -> Result<f64> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")));
    }
    chunked_accuracy(data, |idx, x, _| {
        let per = x.numel() / idx.len();
        let mut noisy = x.clone();
        for (k, &i) in idx.iter().enumerate() {
            let mut r = rng::stream(seed, "eval-noise", i as u64);
            for v in &mut noisy.data_mut()[k * per..(k + 1) * per] {
                let z: f32 = r.sample(StandardNormal);
                *v = (*v + sigma * z).clamp(0.0, 1.0);
            }
        }
        predict(scorer, &noisy)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ta: f64,
    pub ra: f64,
    pub corruption_acc: Option<f64>,
    pub noise_sigma: Option<f32>,
    pub attack: AttackConfig,
    pub n_examples: usize,
    pub seed: u64,
}

/// TA, RA and (when `noise_sigma` is given) Gaussian-noise accuracy.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    data: &Dataset,
    attack: &AttackConfig,
    noise_sigma: Option<f32>,
    seed: u64,
) -> Result<EvalReport> {
    let ta = standard_accuracy(scorer, data)?;
    let ra = robust_accuracy(scorer, data, attack, seed)?;
    let corruption_acc = match noise_sigma {
        Some(s) => Some(gaussian_noise_accuracy(scorer, data, s, seed)?),
        None => None,
    };
    Ok(EvalReport {
        ta,
        ra,
        corruption_acc,
        noise_sigma,
        attack: attack.clone(),
        n_examples: data.len(),
        seed,
    })
}
