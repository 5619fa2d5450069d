//! Experiment configuration (JSON) and metrics output (CSV).
//!
//! A config file only needs the keys it changes: it is merged over the
//! built-in defaults, and unknown keys are rejected. The merged result, with
//! the single top-level seed pushed into every stage, is the effective
//! configuration that reports echo back.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adversary::AttackConfig;
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_NOISE_SIGMA;
use crate::finetune::FinetuneConfig;
use crate::io::write_atomic;
use crate::nn::EncoderConfig;
use crate::pretrain::{PretrainConfig, Variant};
use crate::semisup::SemiSupConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Every random stream in every stage derives from this value.
    pub seed: u64,
    pub data: DatasetSpec,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    /// Whole-network adversarial fine-tuning.
    pub finetune: FinetuneConfig,
    /// Linear evaluation on frozen features.
    pub linear: FinetuneConfig,
    pub semisup: SemiSupConfig,
    /// Attack for stand-alone evaluation.
    pub eval_attack: AttackConfig,
    /// Gaussian-noise sigma for the corruption accuracy; `None` skips it.
    pub noise_sigma: Option<f32>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl ExperimentConfig {
    pub fn desk(seed: u64) -> Self {
        let data = DatasetSpec::desk();
        let encoder = EncoderConfig::desk(data.resolution, data.num_classes());
        ExperimentConfig {
            seed,
            data,
            encoder,
            pretrain: PretrainConfig::desk(Variant::DS, seed),
            finetune: FinetuneConfig::desk_full(seed),
            linear: FinetuneConfig::desk_linear(true, seed),
            semisup: SemiSupConfig::desk(0.1, seed),
            eval_attack: AttackConfig::eval(),
            noise_sigma: Some(DEFAULT_NOISE_SIGMA),
        }
        .with_seed(seed)
    }

    /// Sets the top-level seed and propagates it to every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
        self.linear.seed = seed;
        self.semisup.seed = seed;
        self.semisup.label_model.seed = seed;
        self.semisup.train.seed = seed;
        self
    }

    /// Parses `json` merged over the defaults.
    pub fn from_json(json: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(json).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        if !user.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let mut merged = serde_json::to_value(Self::default())?;
        merge(&mut merged, user);
        let cfg: Self = serde_json::from_value(merged.clone()).map_err(|e| Error::Config(format!("config: {e}")))?;
        let echoed = serde_json::to_value(&cfg)?;
        if let Some(key) = unknown_key(&merged, &echoed, String::new()) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.resolution != self.data.resolution {
            return Err(Error::Config(format!(
                "encoder resolution {} != data resolution {}",
                self.encoder.resolution, self.data.resolution
            )));
        }
        if self.encoder.num_classes != self.data.num_classes() {
            return Err(Error::Config(format!(
                "encoder has {} classes, data has {}",
                self.encoder.num_classes,
                self.data.num_classes()
            )));
        }
        if self.encoder.widths.is_empty() {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if let Some(s) = self.noise_sigma {
            if !(s >= 0.0) {
                return Err(Error::Config(format!("noise_sigma must be >= 0, got {s}")));
            }
        }
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.linear.validate()?;
        self.semisup.validate()?;
        self.eval_attack.validate()
    }
}

/// Recursively overlays `over` onto `base`. An object carrying a `format`
/// tag that differs from the base replaces it wholesale, since its fields
/// belong to another variant.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let retagged = matches!((b.get("format"), o.get("format")), (Some(x), Some(y)) if x != y);
            if retagged {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// First key present in `given` that did not survive deserialization.
fn unknown_key(given: &Value, echoed: &Value, path: String) -> Option<String> {
    let (Value::Object(g), Value::Object(e)) = (given, echoed) else {
        return None;
    };
    for (k, v) in g {
        let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match e.get(k) {
            None => return Some(p),
            Some(ev) => {
                if let Some(bad) = unknown_key(v, ev, p) {
                    return Some(bad);
                }
            }
        }
    }
    None
}

/// Writes `rows` as CSV with a header row, atomically.
pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(format!("csv buffer: {e}")))?;
    write_atomic(path, &bytes)
}

/// Writes pretty JSON atomically.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BranchMode;

    #[test]
    fn partial_config_merges_over_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"seed": 9, "pretrain": {"epochs": 2}, "linear": {"bn_branch": "std"}}"#).unwrap();
        assert_eq!(cfg.pretrain.epochs, 2);
        assert_eq!(cfg.pretrain.batch_size, PretrainConfig::desk(Variant::DS, 0).batch_size);
        assert_eq!(cfg.linear.bn_branch, BranchMode::Standard);
        assert_eq!((cfg.pretrain.seed, cfg.semisup.train.seed), (9, 9));
        cfg.validate().unwrap();
    }

    #[test]
    fn effective_config_round_trips() {
        let cfg = ExperimentConfig::desk(3);
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_and_malformed_keys_are_config_errors() {
        for bad in [r#"{"pretrain": {"epoch": 2}}"#, r#"{"bogus": 1}"#, "[1]", "{", r#"{"pretrain": {"variant": "xyz"}}"#] {
            assert!(matches!(ExperimentConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn switching_dataset_format_replaces_the_source() {
        let cfg = ExperimentConfig::from_json(
            r#"{"data": {"source": {"format": "cifar-binary", "train_files": ["a.bin"], "test_files": ["b.bin"]}, "resolution": 32},
                "encoder": {"resolution": 32, "num_classes": 10}}"#,
        )
        .unwrap();
        assert_eq!(cfg.data.num_classes(), 10);
        cfg.validate().unwrap();
    }

    #[test]
    fn mismatched_encoder_is_rejected() {
        let cfg = ExperimentConfig::from_json(r#"{"encoder": {"resolution": 8}}"#).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        #[derive(Serialize)]
        struct Row {
            epoch: usize,
            loss: f32,
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_csv(&p, &[Row { epoch: 0, loss: 1.5 }, Row { epoch: 1, loss: 0.5 }]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "epoch,loss\n0,1.5\n1,0.5\n");
    }
}
