//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use mixttt_core::Error;

type Result<T> = std::result::Result<T, Error>;

/// Every key the harness understands, with its default (empty = none).
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("out_dir", "out"),
    ("train_path", ""),
    ("test_path", ""),
    ("checkpoint_path", ""),
    ("feature_stats_path", ""),
    ("network.widths", "16,32,64"),
    ("network.strides", "1,2,2"),
    ("network.activation", "smooth"),
    ("network.main_classes", "10"),
    ("network.aux_classes", "4"),
    ("pretrain.epochs", "10"),
    ("pretrain.batch_size", "64"),
    ("pretrain.aux_weight", "1.0"),
    ("pretrain.lr", "0.05"),
    ("pretrain.schedule", "cosine"),
    ("pretrain.momentum", "0.9"),
    ("ttt.task", "rotation"),
    ("ttt.alpha", "0.001"),
    ("ttt.steps", "10"),
    ("ttt.partner_batch", "32"),
    ("ttt.mode", "single_reset"),
    ("ttt.batch_size", "32"),
    ("ttt.reset_every", ""),
    ("ttt.ratio_low", ""),
    ("ttt.ratio_high", ""),
    ("ttt.granularity", "per_pair"),
    ("ttt.temperature", "0.5"),
    ("ttt.weight_contrastive", "1.0"),
    ("ttt.weight_alignment", "1.0"),
    ("ttt.max_samples", "0"),
    (
        "corruptions",
        "gaussian_noise,shot_noise,impulse_noise,brightness,contrast,pixelate",
    ),
    ("severity", "5"),
    ("verify.quadratic", "true"),
    ("verify.taylor", "true"),
    ("verify.chain_rule", "true"),
    ("verify.grad_norm", "true"),
    ("verify.drift", "true"),
    ("verify.taylor_samples", "5"),
    ("verify.grad_norm_samples", "20"),
    ("verify.drift_samples", "1000"),
    ("verify.drift_steps", "30"),
    ("verify.drift_checkpoints", "0,10,20,30"),
    ("verify.corruption", "gaussian_noise"),
    ("synth.classes", "10"),
    ("synth.channels", "3"),
    ("synth.size", "8"),
    ("synth.grid", "4"),
    ("synth.max_shift", "1"),
    ("synth.pixel_noise", "0.02"),
    ("synth.cell_jitter", "0.05"),
    ("synth.contrast", "0.3"),
    ("synth.n_train", "4000"),
    ("synth.n_test", "1000"),
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut values: BTreeMap<String, String> = KEYS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !values.contains_key(k) {
                return Err(Error::Config(format!("line {}: unknown key {k:?}", n + 1)));
            }
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {k:?}",
                    n + 1
                )));
            }
            values.insert(k.to_string(), v.to_string());
        }
        Ok(RunConfig {
            values,
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn set(&mut self, key: &str, value: String) {
        debug_assert!(self.values.contains_key(key));
        self.values.insert(key.to_string(), value);
    }

    /// sha256 over the resolved `key=value` lines, so comments, ordering and
    /// command-line overrides are all accounted for. The output location is
    /// left out: it says where results go, not what they are.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.values.iter().filter(|(k, _)| *k != "out_dir") {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn is_set(&self, key: &str) -> bool {
        !self.raw(key).is_empty()
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        if v.is_empty() {
            return Err(Error::Config(format!("missing value for {key}")));
        }
        v.parse()
            .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.is_set(key) {
            self.get(key).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| Error::Config(format!("{key}: item {s:?}: {e}")))
            })
            .collect()
    }

    /// Path relative to the config file's directory.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.is_set(key).then(|| self.base_dir.join(self.raw(key)))
    }

    /// An input path that must be set and exist.
    pub fn input_path(&self, key: &str) -> Result<PathBuf> {
        let p = self
            .path(key)
            .ok_or_else(|| Error::Config(format!("{key} is required for this command")))?;
        if !p.exists() {
            return Err(Error::Config(format!(
                "{key}: {} does not exist",
                p.display()
            )));
        }
        Ok(p)
    }
}
