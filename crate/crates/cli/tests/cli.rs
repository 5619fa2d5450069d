use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
    "data": {
        "source": {"format": "synthetic", "resolution": 8, "train_size": 40, "test_size": 20},
        "resolution": 8
    },
    "encoder": {"resolution": 8, "widths": [4, 8], "proj_dim": 8},
    "pretrain": {"epochs": 1, "batch_size": 16},
    "finetune": {"epochs": 1, "batch_size": 16, "lr_milestones": [], "attack": {"steps": 1}},
    "linear": {"epochs": 1, "batch_size": 16, "lr_milestones": [], "attack": {"steps": 1}},
    "semisup": {
        "label_fraction": 0.25,
        "attack": {"steps": 1},
        "label_model": {"epochs": 1, "lr_milestones": []},
        "train": {"epochs": 1, "batch_size": 16, "lr_milestones": []}
    },
    "eval_attack": {"steps": 2}
}"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Sandbox { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn acl(&self, args: &[&str], out: &str) -> Output {
        let config = self.path("tiny.json");
        let out_dir = self.path(out);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_acl"));
        cmd.args(args);
        if !args.is_empty() && !args.contains(&"--config") {
            cmd.arg("--config").arg(&config);
        }
        cmd.arg("--out-dir").arg(&out_dir).env("RUST_LOG", "warn");
        cmd.output().unwrap()
    }
}

fn ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn report(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn pretrain_is_deterministic_under_a_fixed_seed() {
    let s = Sandbox::new();
    ok(&s.acl(&["pretrain", "--variant", "ds", "--seed", "7"], "a"));
    ok(&s.acl(&["pretrain", "--variant", "ds", "--seed", "7"], "b"));
    let ra = report(&s.path("a/pretrain_report.json"));
    let rb = report(&s.path("b/pretrain_report.json"));
    assert_eq!(ra["result"]["checkpoint_sha256"], rb["result"]["checkpoint_sha256"]);
    assert_eq!(fs::read(s.path("a/pretrain_ds.aclf")).unwrap(), fs::read(s.path("b/pretrain_ds.aclf")).unwrap());
    // the effective configuration is echoed, seed included
    assert_eq!(ra["config"]["seed"], 7);
    assert_eq!(ra["config"]["pretrain"]["seed"], 7);
    assert_eq!(ra["config"]["pretrain"]["variant"], "ds");
    let metrics = fs::read_to_string(s.path("a/pretrain_metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,variant,loss,lr,wallclock\n"), "{metrics}");
    assert_eq!(metrics.lines().count(), 2);
}

#[test]
fn eval_at_zero_epsilon_reports_equal_accuracies() {
    let s = Sandbox::new();
    ok(&s.acl(&["pretrain", "--variant", "s2s"], "p"));
    let ck = s.path("p/pretrain_s2s.aclf");
    ok(&s.acl(&["linear-eval", "--checkpoint", ck.to_str().unwrap()], "l"));
    let lin = s.path("l/linear_eval.aclf");
    ok(&s.acl(&["eval", "--checkpoint", lin.to_str().unwrap(), "--epsilon", "0"], "e"));
    let r = report(&s.path("e/eval_report.json"));
    assert_eq!(r["result"]["eval"]["ra"], r["result"]["eval"]["ta"]);
    assert_eq!(r["result"]["bn_branch"], "std");
    assert_eq!(r["config"]["eval_attack"]["epsilon"], 0.0);
    let lr = report(&s.path("l/linear_eval_report.json"));
    assert_eq!(lr["config"]["linear"]["bn_branch"], "std");
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let s = Sandbox::new();
    ok(&s.acl(&["ablate", "--seed", "3"], "x"));
    let csv = fs::read_to_string(s.path("x/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5, "{csv}");
    assert!(lines[0].starts_with("variant,bn_branch,ta,ra"));
    let variants: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["s2s", "a2a", "a2s", "ds"]);
}

#[test]
fn finetune_and_semisup_write_their_artifacts() {
    let s = Sandbox::new();
    ok(&s.acl(&["pretrain"], "p"));
    let ck = s.path("p/pretrain_ds.aclf");
    ok(&s.acl(&["finetune", "--checkpoint", ck.to_str().unwrap(), "--bn-branch", "adv"], "f"));
    let r = report(&s.path("f/finetune_report.json"));
    assert_eq!(r["result"]["source_variant"], "ds");
    assert!(r["result"]["eval"]["ra"].as_f64().unwrap() <= r["result"]["eval"]["ta"].as_f64().unwrap() + 1.0);
    assert!(s.path("f/finetune_metrics.csv").exists());

    ok(&s.acl(&["semisup", "--checkpoint", ck.to_str().unwrap(), "--label-fraction", "0.5"], "s"));
    let r = report(&s.path("s/semisup_report.json"));
    assert_eq!(r["result"]["labeled"], 20);
    assert_eq!(r["result"]["unlabeled"], 20);
    let store = acl_core::semisup::PseudoLabelStore::load(s.path("s/pseudo_labels.aclp")).unwrap();
    assert_eq!(store.entries.len(), 40);
    assert_eq!(fs::read_to_string(s.path("s/semisup_metrics.csv")).unwrap().lines().count(), 2);
}

#[test]
fn semisup_grid_selects_from_the_candidates() {
    let s = Sandbox::new();
    ok(&s.acl(&["pretrain", "--variant", "s2s"], "p"));
    let ck = s.path("p/pretrain_s2s.aclf");
    ok(&s.acl(&["semisup", "--checkpoint", ck.to_str().unwrap(), "--grid-alpha", "0.25,1", "--grid-weight", "0,6"], "g"));
    let grid = fs::read_to_string(s.path("g/semisup_grid.csv")).unwrap();
    assert!(grid.starts_with("mix_alpha,temperature,consistency_weight,val_ta,val_ra\n"), "{grid}");
    assert_eq!(grid.lines().count(), 5);
    let r = report(&s.path("g/semisup_report.json"));
    let rows = r["result"]["grid"].as_array().unwrap();
    let best = rows.iter().map(|row| row["val_ra"].as_f64().unwrap()).fold(f64::MIN, f64::max);
    let winner = rows.iter().find(|row| row["val_ra"].as_f64().unwrap() == best).unwrap();
    assert_eq!(r["config"]["semisup"]["mix_alpha"], winner["mix_alpha"]);
    assert_eq!(r["config"]["semisup"]["consistency_weight"], winner["consistency_weight"]);
    let o = s.acl(&["semisup", "--checkpoint", ck.to_str().unwrap(), "--grid-alpha", "2"], "bad");
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let s = Sandbox::new();
    for args in [&["bogus"][..], &["pretrain", "--frobnicate"], &[]] {
        let o = s.acl(args, "u");
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).to_lowercase().contains("usage"), "{args:?}");
    }
    let o = s.acl(&["pretrain", "--variant", "xyz"], "u");
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("xyz"));
    fs::write(s.path("bad.json"), r#"{"pretrain": {"epoch": 3}}"#).unwrap();
    let bad = s.path("bad.json");
    let o = s.acl(&["pretrain", "--config", bad.to_str().unwrap()], "u");
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("pretrain.epoch"));
    let o = s.acl(&["pretrain", "--epsilon", "-1"], "u");
    assert_eq!(o.status.code(), Some(1));
    let o = s.acl(&["--help"], "u");
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_two() {
    let s = Sandbox::new();
    let missing = s.path("missing.aclf");
    let o = s.acl(&["eval", "--checkpoint", missing.to_str().unwrap()], "r");
    assert_eq!(o.status.code(), Some(2));
    fs::write(s.path("junk.aclf"), b"not a checkpoint").unwrap();
    let junk = s.path("junk.aclf");
    let o = s.acl(&["eval", "--checkpoint", junk.to_str().unwrap()], "r");
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));
}
