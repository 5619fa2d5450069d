//! Command-line entry points. Every subcommand loads the effective
//! configuration, runs one pipeline, and writes a metrics CSV, binary
//! artifacts and a JSON report (which echoes the configuration) into
//! `--out-dir`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use acl_core::checkpoint::{config_digest, file_digest, Checkpoint, CheckpointMeta};
use acl_core::data::Dataset;
use acl_core::eval::{evaluate, ModelScorer};
use acl_core::experiment::{write_csv, write_json, ExperimentConfig};
use acl_core::finetune::{adversarial_finetune, linear_eval, FinetuneConfig, FinetuneOutcome};
use acl_core::pretrain::{run_pretraining, PretrainConfig, Pretrained, Variant};
use acl_core::semisup::{grid_search, run_semisup_from, SemiSupConfig, SemiSupGrid};
use acl_core::{BranchMode, Error, ModelParams};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "acl", version, about = "Adversarial contrastive pretraining, fine-tuning and robustness evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON file merged over the built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for checkpoints, metrics and reports.
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct Threat {
    /// L-infinity budget for training and evaluation attacks.
    #[arg(long)]
    pub epsilon: Option<f32>,
    /// PGD steps of the evaluation attack.
    #[arg(long)]
    pub steps: Option<usize>,
}

/// Comma-separated candidates for the semi-supervised loss weights. When
/// any is given, the weights are chosen by robust accuracy on a held-out
/// part of the labeled set before the final run.
#[derive(Debug, Args)]
pub struct GridArgs {
    /// Candidates for the labeled cross-entropy vs distillation mix.
    #[arg(long, value_delimiter = ',')]
    pub grid_alpha: Vec<f32>,
    /// Candidates for the distillation temperature.
    #[arg(long, value_delimiter = ',')]
    pub grid_temperature: Vec<f32>,
    /// Candidates for the weight of the robustness (KL) term.
    #[arg(long, value_delimiter = ',')]
    pub grid_weight: Vec<f32>,
}

impl GridArgs {
    fn grid(&self, cfg: &SemiSupConfig) -> Option<SemiSupGrid> {
        if self.grid_alpha.is_empty() && self.grid_temperature.is_empty() && self.grid_weight.is_empty() {
            return None;
        }
        let or = |v: &Vec<f32>, d: f32| if v.is_empty() { vec![d] } else { v.clone() };
        Some(SemiSupGrid {
            mix_alpha: or(&self.grid_alpha, cfg.mix_alpha),
            temperature: or(&self.grid_temperature, cfg.temperature),
            consistency_weight: or(&self.grid_weight, cfg.consistency_weight),
        })
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Contrastive pretraining of one variant.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// s2s, a2a, a2s or ds.
        #[arg(long)]
        variant: Option<Variant>,
        /// L-infinity budget of the pretraining attack.
        #[arg(long)]
        epsilon: Option<f32>,
        /// PGD steps of the pretraining attack.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Whole-network TRADES fine-tuning.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint; random initialization when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Batch-norm branch to keep: std or adv.
        #[arg(long)]
        bn_branch: Option<BranchMode>,
        #[command(flatten)]
        threat: Threat,
    },
    /// Linear classifier on frozen features.
    LinearEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Batch-norm branch of the frozen encoder: std or adv.
        #[arg(long)]
        bn_branch: Option<BranchMode>,
        #[command(flatten)]
        threat: Threat,
    },
    /// Pretraining, pseudo-labeling and semi-supervised adversarial training.
    Semisup {
        #[command(flatten)]
        common: Common,
        /// Skip pretraining and start from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Share of training labels kept.
        #[arg(long)]
        label_fraction: Option<f64>,
        #[command(flatten)]
        threat: Threat,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Clean, robust and noise accuracy of a checkpoint on the test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bn_branch: Option<BranchMode>,
        #[command(flatten)]
        threat: Threat,
    },
    /// Pretrains all four variants with a shared seed and compares them
    /// under linear evaluation.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        threat: Threat,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Pretrain { common, .. }
            | Command::Finetune { common, .. }
            | Command::LinearEval { common, .. }
            | Command::Semisup { common, .. }
            | Command::Eval { common, .. }
            | Command::Ablate { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::LinearEval { .. } => "linear-eval",
            Command::Semisup { .. } => "semisup",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
        }
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn load_config(common: &Common) -> acl_core::Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let seed = common.seed.unwrap_or(cfg.seed);
    Ok(cfg.with_seed(seed))
}

fn set_threat(cfg: &mut FinetuneConfig, threat: &Threat) {
    if let Some(eps) = threat.epsilon {
        cfg.attack.epsilon = eps;
        cfg.eval_attack.epsilon = eps;
    }
    if let Some(s) = threat.steps {
        cfg.eval_attack.steps = s;
    }
}

pub fn execute(command: Command) -> acl_core::Result<()> {
    let mut cfg = load_config(command.common())?;
    let out = command.common().out_dir.clone();
    let name = command.name();
    match command {
        Command::Pretrain { variant, epsilon, steps, .. } => {
            if let Some(v) = variant {
                cfg.pretrain.variant = v;
            }
            if let Some(e) = epsilon {
                cfg.pretrain.attack.epsilon = e;
            }
            if let Some(s) = steps {
                cfg.pretrain.attack.steps = s;
            }
            cfg.validate()?;
            let (train, _) = cfg.data.load()?;
            let t = Instant::now();
            let pre = pretrain(&cfg, &cfg.pretrain, &train)?;
            let ck = out.join(format!("pretrain_{}.aclf", cfg.pretrain.variant));
            save_pretrained(&cfg, &cfg.pretrain, &pre, &ck)?;
            write_csv(out.join("pretrain_metrics.csv"), &pre.history)?;
            report(
                &out,
                name,
                &cfg,
                json!({
                    "checkpoint": ck,
                    "checkpoint_sha256": file_digest(&ck)?,
                    "final_loss": pre.history.last().map(|h| h.loss),
                    "seconds": t.elapsed().as_secs_f64(),
                }),
            )
        }
        Command::Finetune {
            checkpoint,
            bn_branch,
            threat,
            ..
        } => {
            if let Some(b) = bn_branch {
                cfg.finetune.bn_branch = b;
            }
            set_threat(&mut cfg.finetune, &threat);
            cfg.validate()?;
            let (train, test) = cfg.data.load()?;
            let (start, source) = starting_point(&cfg, checkpoint.as_deref())?;
            let mut records = Vec::new();
            let outcome = adversarial_finetune(&start, &train, Some(&test), &cfg.finetune, |r| records.push(r.clone()))?;
            write_csv(out.join("finetune_metrics.csv"), &records)?;
            finish_supervised(&out, name, &cfg, &cfg.finetune, source.as_ref(), &outcome)
        }
        Command::LinearEval {
            checkpoint,
            bn_branch,
            threat,
            ..
        } => {
            let (start, source) = starting_point(&cfg, checkpoint.as_deref())?;
            cfg.linear.bn_branch = bn_branch
                .or_else(|| source.as_ref().and_then(|m| m.variant).map(Variant::eval_branch))
                .unwrap_or(cfg.linear.bn_branch);
            set_threat(&mut cfg.linear, &threat);
            cfg.validate()?;
            let (train, test) = cfg.data.load()?;
            let mut records = Vec::new();
            let outcome = linear_eval(&start, &train, Some(&test), &cfg.linear, |r| records.push(r.clone()))?;
            write_csv(out.join("linear_metrics.csv"), &records)?;
            finish_supervised(&out, name, &cfg, &cfg.linear, source.as_ref(), &outcome)
        }
        Command::Semisup {
            checkpoint,
            label_fraction,
            threat,
            grid,
            ..
        } => {
            if let Some(f) = label_fraction {
                cfg.semisup.label_fraction = f;
            }
            if let Some(eps) = threat.epsilon {
                cfg.semisup.attack.epsilon = eps;
            }
            set_threat(&mut cfg.semisup.train, &threat);
            cfg.validate()?;
            let (train, test) = cfg.data.load()?;
            let pretrained = match &checkpoint {
                Some(p) => load_checkpoint(&cfg, p)?.params,
                None => {
                    let pre = pretrain(&cfg, &cfg.pretrain, &train)?;
                    save_pretrained(&cfg, &cfg.pretrain, &pre, &out.join(format!("pretrain_{}.aclf", cfg.pretrain.variant)))?;
                    write_csv(out.join("pretrain_metrics.csv"), &pre.history)?;
                    pre.model
                }
            };
            let mut grid_rows = None;
            if let Some(g) = grid.grid(&cfg.semisup) {
                let (rows, chosen) = grid_search(&pretrained, &train, &cfg.semisup, &g)?;
                write_csv(out.join("semisup_grid.csv"), &rows)?;
                cfg.semisup = chosen;
                grid_rows = Some(rows);
            }
            let outcome = run_semisup_from(&pretrained, &train, &test, &cfg.semisup)?;
            let store = out.join("pseudo_labels.aclp");
            outcome.pseudo.store.save(&store)?;
            let ck = out.join("semisup.aclf");
            save_model(&cfg, "semisup", None, cfg.semisup.train.epochs, &cfg.semisup, &outcome.model, &ck)?;
            write_csv(out.join("semisup_metrics.csv"), &outcome.history)?;
            report(
                &out,
                name,
                &cfg,
                json!({
                    "labeled": outcome.labeled.len(),
                    "unlabeled": outcome.pseudo.store.n_unlabeled(),
                    "pseudo_label_accuracy": outcome.pseudo.pseudo_accuracy,
                    "pseudo_labels": store,
                    "checkpoint": ck,
                    "checkpoint_sha256": file_digest(&ck)?,
                    "eval": outcome.report,
                    "grid": grid_rows,
                }),
            )
        }
        Command::Eval {
            checkpoint,
            bn_branch,
            threat,
            ..
        } => {
            if let Some(eps) = threat.epsilon {
                cfg.eval_attack.epsilon = eps;
            }
            if let Some(s) = threat.steps {
                cfg.eval_attack.steps = s;
            }
            cfg.validate()?;
            let ck = load_checkpoint(&cfg, &checkpoint)?;
            let branch = bn_branch
                .or_else(|| ck.meta.variant.map(Variant::eval_branch))
                .unwrap_or(BranchMode::Adversarial);
            let (_, test) = cfg.data.load()?;
            let r = evaluate(&ModelScorer::new(&ck.params, branch), &test, &cfg.eval_attack, cfg.noise_sigma, cfg.seed)?;
            let row = EvalRow {
                ta: r.ta,
                ra: r.ra,
                corruption_acc: r.corruption_acc,
                epsilon: r.attack.epsilon,
                steps: r.attack.steps,
                n_examples: r.n_examples,
            };
            write_csv(out.join("eval_metrics.csv"), &[row])?;
            report(&out, name, &cfg, json!({ "checkpoint": checkpoint, "bn_branch": branch, "eval": r }))
        }
        Command::Ablate { threat, .. } => {
            set_threat(&mut cfg.linear, &threat);
            if let Some(eps) = threat.epsilon {
                cfg.pretrain.attack.epsilon = eps;
            }
            cfg.validate()?;
            let (train, test) = cfg.data.load()?;
            let mut rows = Vec::new();
            for v in Variant::ALL {
                let pc = PretrainConfig {
                    variant: v,
                    ..cfg.pretrain.clone()
                };
                let t = Instant::now();
                let pre = pretrain(&cfg, &pc, &train)?;
                let seconds = t.elapsed().as_secs_f64();
                save_pretrained(&cfg, &pc, &pre, &out.join(format!("pretrain_{v}.aclf")))?;
                let lc = FinetuneConfig {
                    bn_branch: v.eval_branch(),
                    ..cfg.linear.clone()
                };
                let o = linear_eval(&pre.model, &train, Some(&test), &lc, |_| {})?;
                rows.push(AblationRow {
                    variant: v,
                    bn_branch: lc.bn_branch,
                    ta: o.report.as_ref().map_or(f64::NAN, |r| r.ta),
                    ra: o.report.as_ref().map_or(f64::NAN, |r| r.ra),
                    final_loss: pre.history.last().map_or(f32::NAN, |h| h.loss),
                    pretrain_seconds: seconds,
                });
                log::info!("ablate {v}: done");
            }
            let csv = out.join("ablation.csv");
            write_csv(&csv, &rows)?;
            report(&out, name, &cfg, json!({ "table": csv, "rows": rows }))
        }
    }
}

#[derive(Debug, Serialize)]
struct EvalRow {
    ta: f64,
    ra: f64,
    corruption_acc: Option<f64>,
    epsilon: f32,
    steps: usize,
    n_examples: usize,
}

#[derive(Debug, Serialize)]
struct AblationRow {
    variant: Variant,
    bn_branch: BranchMode,
    ta: f64,
    ra: f64,
    final_loss: f32,
    pretrain_seconds: f64,
}

fn pretrain(cfg: &ExperimentConfig, pc: &PretrainConfig, train: &Dataset) -> acl_core::Result<Pretrained> {
    let init = ModelParams::init(&cfg.encoder, cfg.seed)?;
    run_pretraining(train, init, pc, |e| log::info!("pretrain {} epoch {}: loss {:.4}", e.variant, e.epoch, e.loss))
}

fn save_pretrained(cfg: &ExperimentConfig, pc: &PretrainConfig, pre: &Pretrained, path: &Path) -> acl_core::Result<()> {
    save_model(cfg, "pretrain", Some(pc.variant), pc.epochs, pc, &pre.model, path)
}

fn save_model<T: Serialize>(
    cfg: &ExperimentConfig,
    stage: &str,
    variant: Option<Variant>,
    epoch: usize,
    stage_cfg: &T,
    model: &ModelParams,
    path: &Path,
) -> acl_core::Result<()> {
    let meta = CheckpointMeta {
        stage: stage.into(),
        variant,
        epoch,
        seed: cfg.seed,
        config_digest: config_digest(&(&cfg.data, &cfg.encoder, stage_cfg))?,
        encoder: model.config().clone(),
        head_essential: false,
        notes: Default::default(),
    };
    Checkpoint::new(meta, model.clone()).save(path)
}

fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> acl_core::Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    let enc = &ck.params.config();
    if enc.resolution != cfg.data.resolution || enc.num_classes != cfg.data.num_classes() {
        return Err(Error::Config(format!(
            "checkpoint {} was built for {}px / {} classes, the data has {}px / {}",
            path.display(),
            enc.resolution,
            enc.num_classes,
            cfg.data.resolution,
            cfg.data.num_classes()
        )));
    }
    Ok(ck)
}

fn starting_point(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> acl_core::Result<(ModelParams, Option<CheckpointMeta>)> {
    match checkpoint {
        Some(p) => {
            let ck = load_checkpoint(cfg, p)?;
            Ok((ck.params, Some(ck.meta)))
        }
        None => Ok((ModelParams::init(&cfg.encoder, cfg.seed)?, None)),
    }
}

fn finish_supervised(
    out: &Path,
    name: &str,
    cfg: &ExperimentConfig,
    stage_cfg: &FinetuneConfig,
    source: Option<&CheckpointMeta>,
    outcome: &FinetuneOutcome,
) -> acl_core::Result<()> {
    let ck = out.join(format!("{}.aclf", name.replace('-', "_")));
    save_model(cfg, name, source.and_then(|m| m.variant), stage_cfg.epochs, stage_cfg, &outcome.model, &ck)?;
    report(
        out,
        name,
        cfg,
        json!({
            "source_variant": source.and_then(|m| m.variant),
            "selected_epoch": outcome.selected_epoch,
            "checkpoint": ck,
            "checkpoint_sha256": file_digest(&ck)?,
            "eval": outcome.report,
        }),
    )
}

fn report(out: &Path, name: &str, cfg: &ExperimentConfig, result: serde_json::Value) -> acl_core::Result<()> {
    let path = out.join(format!("{}_report.json", name.replace('-', "_")));
    write_json(&path, &json!({ "command": name, "config": cfg, "result": result }))?;
    println!("{}", path.display());
    Ok(())
}
