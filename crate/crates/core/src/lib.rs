//! Adversarial contrastive pretraining toolkit.
//!
//! Pretrains small convolutional encoders so that their representations agree
//! across augmented and adversarially perturbed views (standard-to-standard,
//! adversarial-to-adversarial, adversarial-to-standard, and the dual-stream
//! combination), then fine-tunes and evaluates them for clean and robust
//! accuracy. Everything runs on the crate's own reverse-mode autodiff tape.

pub mod adversary;
pub mod augment;
pub mod checkpoint;
pub mod autodiff;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod exec;
pub mod finetune;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod semisup;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use nn::{BnMode, BranchMode, EncoderConfig, ModelParams, Trainable};
pub use tensor::Tensor;
