//! Run configuration: one JSON file plus `--key=value` overrides on dotted paths.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::Preset;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_LAMBDA;
use crate::optim::{LrSchedule, Sgd};
use crate::vit::EncoderConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub lambda: f64,
    pub schedule: LrSchedule,
    pub sgd: Sgd,
    pub batch_size: usize,
    pub seed: u64,
    pub data_root: PathBuf,
    pub preset: Preset,
    /// Merge tokens by pseudo-cluster instead of the predicted assignment while training.
    pub teacher_forcing: bool,
    /// Keep the cluster MLP at its initial weights.
    #[serde(default)]
    pub freeze_cluster: bool,
    pub out_dir: PathBuf,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub eval_warmup: usize,
    pub eval_iters: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: EncoderConfig::tiny_desk(),
            lambda: DEFAULT_LAMBDA,
            schedule: LrSchedule {
                base_lr: 0.01,
                min_lr: 0.0001,
                power: 0.9,
                total_iters: 2000,
            },
            sgd: Sgd::default(),
            batch_size: 8,
            seed: 7,
            data_root: PathBuf::from("data/sparse"),
            preset: Preset::Sparse,
            teacher_forcing: false,
            freeze_cluster: false,
            out_dir: PathBuf::from("runs/default"),
            log_every: 50,
            checkpoint_every: 500,
            eval_warmup: 10,
            eval_iters: 100,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.schedule.validate()?;
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 || self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("batch_size, log_every and checkpoint_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.sgd.momentum) || self.sgd.weight_decay < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1) and weight_decay be >= 0".into()));
        }
        if self.eval_warmup == 0 || self.eval_iters == 0 {
            return Err(Error::Config("eval_warmup and eval_iters must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Applies `key=value` overrides (leading `--` optional). Keys are dotted paths such as
    /// `encoder.clusters` or `schedule.base_lr`; values are JSON, or bare strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for raw in overrides {
            let raw = raw.as_ref().trim_start_matches("--");
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {raw:?} is not key=value")))?;
            let parsed = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
            let mut node = &mut tree;
            for part in key.split('.') {
                node = node
                    .get_mut(part)
                    .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
            }
            *node = parsed;
        }
        serde_json::from_value(tree).map_err(|e| Error::Config(format!("bad override: {e}")))
    }

    /// Short stable identifier of the configuration (FNV-1a over its JSON form).
    pub fn run_id(&self) -> String {
        let json = serde_json::to_string(self).unwrap_or_default();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")[..12].to_string()
    }

    /// Top-level and encoder fields that differ from `other`, as `name: ours vs theirs`.
    pub fn diff_encoder(&self, other: &EncoderConfig) -> Vec<String> {
        let a = serde_json::to_value(&self.encoder).unwrap_or(Value::Null);
        let b = serde_json::to_value(other).unwrap_or(Value::Null);
        let (Value::Object(a), Value::Object(b)) = (a, b) else {
            return vec!["encoder".into()];
        };
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(*v))
            .map(|(k, v)| format!("encoder.{k}: {v} vs {}", b.get(k).unwrap_or(&Value::Null)))
            .collect()
    }
}
