//! Encoder, projection head and classifier with dual batch normalization.
//!
//! All convolution and linear weights are shared between the standard and
//! adversarial branches; each batch-norm layer keeps one affine pair and one
//! set of running statistics per branch. A forward pass names its branch and
//! only that branch's batch-norm state is read or updated.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NormStats, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchMode {
    #[serde(rename = "std")]
    Standard,
    #[serde(rename = "adv")]
    Adversarial,
}

impl BranchMode {
    pub fn tag(self) -> &'static str {
        match self {
            BranchMode::Standard => "std",
            BranchMode::Adversarial => "adv",
        }
    }
}

impl std::str::FromStr for BranchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "std" | "standard" => Ok(BranchMode::Standard),
            "adv" | "adversarial" => Ok(BranchMode::Adversarial),
            other => Err(Error::Config(format!("unknown bn branch `{other}`"))),
        }
    }
}

/// How a batch-norm layer normalizes during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics updated.
    Train,
    /// Batch statistics; running statistics left untouched. Used while
    /// generating attacks inside a training step.
    Frozen,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub resolution: usize,
    /// Output channels of each conv block; the first block keeps resolution,
    /// every later block halves it. The last width is the feature dim `d`.
    pub widths: Vec<usize>,
    pub proj_dim: usize,
    pub num_classes: usize,
    /// `false` is the single-BN ablation: both branches share one set.
    pub dual_bn: bool,
    pub bn_momentum: f32,
    pub bn_eps: f32,
}

impl EncoderConfig {
    /// Four-block encoder used for the small-scale experiments.
    pub fn desk(resolution: usize, num_classes: usize) -> Self {
        EncoderConfig {
            in_channels: 3,
            resolution,
            widths: vec![8, 16, 16, 32],
            proj_dim: 32,
            num_classes,
            dual_bn: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// ResNet-18 stage widths on 32x32 inputs, as a plain conv stack.
    pub fn resnet18_widths(num_classes: usize) -> Self {
        EncoderConfig {
            widths: vec![64, 128, 256, 512],
            proj_dim: 128,
            ..Self::desk(32, num_classes)
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("encoder: {m}")));
        if self.in_channels == 0 || self.resolution == 0 || self.proj_dim == 0 || self.num_classes == 0 {
            return bad("all extents must be >= 1");
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be non-empty and positive");
        }
        let mut r = self.resolution;
        for _ in 1..self.widths.len() {
            r = (r + 2 - 3) / 2 + 1;
        }
        if r == 0 {
            return bad("too many stride-2 blocks for the resolution");
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_eps > 0.0) {
            return bad("bn momentum must be in (0, 1] and eps positive");
        }
        Ok(())
    }

    pub fn stride(&self, block: usize) -> usize {
        if block == 0 {
            1
        } else {
            2
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BnState {
    fn identity(channels: usize) -> Self {
        BnState {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualBatchNorm {
    pub standard: BnState,
    pub adversarial: BnState,
    pub momentum: f32,
    pub eps: f32,
    pub shared: bool,
}

/// Tape handles for the affine parameters of both branches.
#[derive(Clone, Copy, Debug)]
pub struct BnVars {
    pub std_gamma: Var,
    pub std_beta: Var,
    pub adv_gamma: Var,
    pub adv_beta: Var,
}

impl DualBatchNorm {
    pub fn new(channels: usize, momentum: f32, eps: f32, shared: bool) -> Self {
        DualBatchNorm {
            standard: BnState::identity(channels),
            adversarial: BnState::identity(channels),
            momentum,
            eps,
            shared,
        }
    }

    pub fn channels(&self) -> usize {
        self.standard.gamma.numel()
    }

    /// Branch whose state is actually used (always standard when shared).
    pub fn resolve(&self, branch: BranchMode) -> BranchMode {
        if self.shared {
            BranchMode::Standard
        } else {
            branch
        }
    }

    pub fn state(&self, branch: BranchMode) -> &BnState {
        match self.resolve(branch) {
            BranchMode::Standard => &self.standard,
            BranchMode::Adversarial => &self.adversarial,
        }
    }

    fn state_mut(&mut self, branch: BranchMode) -> &mut BnState {
        match self.resolve(branch) {
            BranchMode::Standard => &mut self.standard,
            BranchMode::Adversarial => &mut self.adversarial,
        }
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BnVars {
        BnVars {
            std_gamma: tape.leaf(self.standard.gamma.clone(), requires_grad),
            std_beta: tape.leaf(self.standard.beta.clone(), requires_grad),
            adv_gamma: tape.leaf(self.adversarial.gamma.clone(), requires_grad),
            adv_beta: tape.leaf(self.adversarial.beta.clone(), requires_grad),
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: Var,
        vars: &BnVars,
        branch: BranchMode,
        mode: BnMode,
    ) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() < 2 || shape[1] != self.channels() {
            return Err(Error::shape(
                "dual_bn_forward",
                format!("input {shape:?} for {} channels", self.channels()),
            ));
        }
        let (gamma, beta) = match self.resolve(branch) {
            BranchMode::Standard => (vars.std_gamma, vars.std_beta),
            BranchMode::Adversarial => (vars.adv_gamma, vars.adv_beta),
        };
        let eps = self.eps;
        match mode {
            BnMode::Eval => {
                let st = self.state(branch);
                let (y, _) = tape.batch_norm(
                    x,
                    gamma,
                    beta,
                    NormStats::Fixed {
                        mean: st.running_mean.data(),
                        var: st.running_var.data(),
                        eps,
                    },
                )?;
                Ok(y)
            }
            BnMode::Train | BnMode::Frozen => {
                if shape[0] < 2 {
                    return Err(Error::Input(format!(
                        "dual_bn_forward: batch size {} < 2 with batch statistics",
                        shape[0]
                    )));
                }
                let (y, moments) = tape.batch_norm(x, gamma, beta, NormStats::Batch { eps })?;
                if mode == BnMode::Train {
                    let m = moments.expect("batch moments");
                    let momentum = self.momentum;
                    let unbias = m.count as f32 / (m.count as f32 - 1.0).max(1.0);
                    let st = self.state_mut(branch);
                    for (r, &b) in st.running_mean.data_mut().iter_mut().zip(&m.mean) {
                        *r = (1.0 - momentum) * *r + momentum * b;
                    }
                    for (r, &b) in st.running_var.data_mut().iter_mut().zip(&m.var) {
                        *r = (1.0 - momentum) * *r + momentum * b * unbias;
                    }
                }
                Ok(y)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`, applied as `x . weight + bias`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn zeros(inp: usize, out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[inp, out]),
            bias: Tensor::zeros(&[out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    /// `[out, in, 3, 3]`, no bias (batch norm follows).
    pub weight: Tensor,
    pub bn: DualBatchNorm,
}

/// `z = W2 . relu(W1 . h)`. There are no biases: a shared output offset
/// would let every embedding align with it, a trivial way for the
/// contrastive loss to collapse.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    /// `[d, d]`
    pub w1: Tensor,
    /// `[d, proj_dim]`
    pub w2: Tensor,
}

/// Which parameter groups receive gradients in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub encoder: bool,
    pub head: bool,
    pub classifier: bool,
}

impl Trainable {
    pub const PRETRAIN: Trainable = Trainable {
        encoder: true,
        head: true,
        classifier: false,
    };
    pub const FINETUNE: Trainable = Trainable {
        encoder: true,
        head: false,
        classifier: true,
    };
    pub const LINEAR: Trainable = Trainable {
        encoder: false,
        head: false,
        classifier: true,
    };
    pub const NONE: Trainable = Trainable {
        encoder: false,
        head: false,
        classifier: false,
    };
}

#[derive(Clone, Debug)]
struct BoundBlock {
    weight: Var,
    bn: BnVars,
}

/// Model parameters placed on a tape as leaves for one step.
#[derive(Clone, Debug)]
pub struct Bound {
    blocks: Vec<BoundBlock>,
    head: [Var; 2],
    classifier: [Var; 2],
}

impl Bound {
    /// Leaves in [`ModelParams::learnables_mut`] order.
    pub fn leaves(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([b.weight, b.bn.std_gamma, b.bn.std_beta, b.bn.adv_gamma, b.bn.adv_beta]);
        }
        out.extend(self.head);
        out.extend(self.classifier);
        out
    }

    /// Gradient per learnable, `None` where nothing flowed.
    pub fn gradients(&self, tape: &Tape) -> Vec<Option<Tensor>> {
        self.leaves().into_iter().map(|v| tape.grad(v)).collect()
    }

    pub fn classifier_weight(&self) -> Var {
        self.classifier[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: EncoderConfig,
    seed: u64,
    pub blocks: Vec<ConvBlock>,
    pub head: ProjectionHead,
    pub classifier: Linear,
}

impl ModelParams {
    /// He-normal conv/linear weights, identity batch norm, zero classifier.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "init", 0);
        let mut blocks = Vec::with_capacity(config.widths.len());
        let mut in_ch = config.in_channels;
        for &w in &config.widths {
            let fan_in = in_ch * 9;
            blocks.push(ConvBlock {
                weight: Tensor::randn(&[w, in_ch, 3, 3], (2.0 / fan_in as f32).sqrt(), &mut r),
                bn: DualBatchNorm::new(w, config.bn_momentum, config.bn_eps, !config.dual_bn),
            });
            in_ch = w;
        }
        let d = config.feature_dim();
        let head = ProjectionHead {
            w1: Tensor::randn(&[d, d], (2.0 / d as f32).sqrt(), &mut r),
            w2: Tensor::randn(&[d, config.proj_dim], (2.0 / d as f32).sqrt(), &mut r),
        };
        Ok(ModelParams {
            config: config.clone(),
            seed,
            blocks,
            head,
            classifier: Linear::zeros(d, config.num_classes),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(n, _)| !n.ends_with("running_mean") && !n.ends_with("running_var"))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn reset_classifier(&mut self) {
        self.classifier = Linear::zeros(self.config.feature_dim(), self.config.num_classes);
    }

    /// Collapses dual batch norm into a single set copied from `branch`.
    pub fn collapse_bn(&mut self, branch: BranchMode) {
        for b in &mut self.blocks {
            let chosen = b.bn.state(branch).clone();
            b.bn.standard = chosen.clone();
            b.bn.adversarial = chosen;
            b.bn.shared = true;
        }
        self.config.dual_bn = false;
    }

    /// Learnable tensors in a fixed order matching [`Bound::leaves`].
    pub fn learnables_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bn.standard.gamma);
            out.push(&mut b.bn.standard.beta);
            out.push(&mut b.bn.adversarial.gamma);
            out.push(&mut b.bn.adversarial.beta);
        }
        out.push(&mut self.head.w1);
        out.push(&mut self.head.w2);
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    /// Every tensor including running statistics, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("encoder.block{i}.conv.weight"), &b.weight));
            for (tag, st) in [("std", &b.bn.standard), ("adv", &b.bn.adversarial)] {
                let p = format!("encoder.block{i}.bn.{tag}");
                out.push((format!("{p}.gamma"), &st.gamma));
                out.push((format!("{p}.beta"), &st.beta));
                out.push((format!("{p}.running_mean"), &st.running_mean));
                out.push((format!("{p}.running_var"), &st.running_var));
            }
        }
        out.push(("head.fc1.weight".into(), &self.head.w1));
        out.push(("head.fc2.weight".into(), &self.head.w2));
        out.push(("classifier.weight".into(), &self.classifier.weight));
        out.push(("classifier.bias".into(), &self.classifier.bias));
        out
    }

    /// Rebuilds parameters from named tensors; every expected name must be
    /// present with the shape implied by `config`.
    pub fn from_named(config: &EncoderConfig, seed: u64, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut model = ModelParams::init(config, seed)?;
        let names: Vec<(String, Vec<usize>)> = model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let mut loaded = Vec::with_capacity(names.len());
        for (name, shape) in names {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::Input(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "from_named",
                    format!("`{name}` has {:?}, expected {shape:?}", t.shape()),
                ));
            }
            loaded.push(t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Input(format!("unexpected tensor `{extra}`")));
        }
        let mut it = loaded.into_iter();
        for b in &mut model.blocks {
            b.weight = it.next().unwrap();
            for st in [&mut b.bn.standard, &mut b.bn.adversarial] {
                st.gamma = it.next().unwrap();
                st.beta = it.next().unwrap();
                st.running_mean = it.next().unwrap();
                st.running_var = it.next().unwrap();
            }
        }
        model.head.w1 = it.next().unwrap();
        model.head.w2 = it.next().unwrap();
        model.classifier.weight = it.next().unwrap();
        model.classifier.bias = it.next().unwrap();
        Ok(model)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: Trainable) -> Bound {
        let blocks = self
            .blocks
            .iter()
            .map(|b| BoundBlock {
                weight: tape.leaf(b.weight.clone(), trainable.encoder),
                bn: b.bn.bind(tape, trainable.encoder),
            })
            .collect();
        let h = &self.head;
        let head = [tape.leaf(h.w1.clone(), trainable.head), tape.leaf(h.w2.clone(), trainable.head)];
        let classifier = [
            tape.leaf(self.classifier.weight.clone(), trainable.classifier),
            tape.leaf(self.classifier.bias.clone(), trainable.classifier),
        ];
        Bound {
            blocks,
            head,
            classifier,
        }
    }

    /// `[n, c, r, r]` images to `[n, d]` features.
    pub fn encoder_forward(
        &mut self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        branch: BranchMode,
        mode: BnMode,
    ) -> Result<Var> {
        let s = tape.shape(x);
        let c = &self.config;
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.resolution || s[3] != c.resolution {
            return Err(Error::shape(
                "encoder_forward",
                format!(
                    "input {s:?}, expected [n, {}, {}, {}]",
                    c.in_channels, c.resolution, c.resolution
                ),
            ));
        }
        let mut h = x;
        for (i, (block, bb)) in self.blocks.iter_mut().zip(&bound.blocks).enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            h = tape.conv2d(h, bb.weight, stride, 1)?;
            h = block.bn.forward(tape, h, &bb.bn, branch, mode)?;
            h = tape.relu(h)?;
        }
        tape.global_avg_pool(h)
    }

    /// Linear, relu, linear. Output is not normalized.
    pub fn projection_forward(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
        check_features(tape, features, self.config.feature_dim(), "projection_forward")?;
        let [w1, w2] = bound.head;
        let h = tape.matmul(features, w1)?;
        let h = tape.relu(h)?;
        tape.matmul(h, w2)
    }

    pub fn classifier_forward(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
        check_features(tape, features, self.config.feature_dim(), "classifier_forward")?;
        let [w, b] = bound.classifier;
        let h = tape.matmul(features, w)?;
        tape.add_bias(h, b)
    }

    /// Encoder then classifier.
    pub fn logits(
        &mut self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        branch: BranchMode,
        mode: BnMode,
    ) -> Result<Var> {
        let f = self.encoder_forward(tape, bound, x, branch, mode)?;
        self.classifier_forward(tape, bound, f)
    }

    /// Encoder then projection head.
    pub fn embed(
        &mut self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        branch: BranchMode,
        mode: BnMode,
    ) -> Result<Var> {
        let f = self.encoder_forward(tape, bound, x, branch, mode)?;
        self.projection_forward(tape, bound, f)
    }

    /// Eval-mode logits for a batch of images, no gradients.
    pub fn predict(&self, images: &Tensor, branch: BranchMode) -> Result<Tensor> {
        let mut model = self.clone();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, Trainable::NONE);
        let x = tape.constant(images.clone());
        let y = model.logits(&mut tape, &bound, x, branch, BnMode::Eval)?;
        Ok(tape.value(y).clone())
    }
}

fn check_features(tape: &Tape, v: Var, d: usize, op: &'static str) -> Result<()> {
    let s = tape.shape(v);
    if s.len() != 2 || s[1] != d {
        return Err(Error::shape(op, format!("features {s:?}, expected [n, {d}]")));
    }
    Ok(())
}
