//! Run configuration: file loading, `key=value` overrides and validation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::optim::OptimConfig;
use crate::synth::SynthConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GazeParams {
    /// Heatmap kernel width as a fraction of the image width.
    pub sigma_frac: f64,
    pub w_floor: f64,
}

impl Default for GazeParams {
    fn default() -> Self {
        GazeParams {
            sigma_frac: 0.05,
            w_floor: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 4,
            base_channels: 16,
        }
    }
}

impl ModelConfig {
    /// Gaze extractor widths: one stride-2 stage per encoder level, ending at
    /// the bottleneck width.
    pub fn extractor_widths(&self) -> Vec<usize> {
        (1..=self.depth).map(|i| self.base_channels << i).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Pseudo-label and evaluation threshold (`prob ≥ threshold`).
    pub threshold: f64,
    /// Fixed summation and batch order. Training here is always
    /// single-threaded, so this is recorded but never relaxed.
    pub strict: bool,
    pub out_dir: String,
    pub optimizer: OptimConfig,
    pub loss: LossWeights,
    pub gaze: GazeParams,
    pub model: ModelConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            epochs: 200,
            batch_size: 32,
            threshold: 0.5,
            strict: true,
            out_dir: "runs".into(),
            optimizer: OptimConfig::default(),
            loss: LossWeights::default(),
            gaze: GazeParams::default(),
            model: ModelConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Named starting points for a configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Full-length defaults: 200 epochs, batch 32, lr 1e-5.
    Paper,
    /// Short CPU runs on 64×64 synthetic data.
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::InvalidConfig(format!("unknown profile {other:?} (expected paper or desk)"))),
        }
    }
}

impl RunConfig {
    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Paper => RunConfig::default(),
            Profile::Desk => RunConfig::desk(),
        }
    }

    /// Desk-scale profile: 30 epochs, batch 8 and a larger step size so a
    /// few hundred RMSProp steps can move the weights.
    pub fn desk() -> Self {
        let mut cfg = RunConfig {
            epochs: 30,
            batch_size: 8,
            ..RunConfig::default()
        };
        cfg.optimizer.lr = 3e-4;
        cfg.optimizer.adapt_lr = 1e-4;
        cfg.model.base_channels = 8;
        cfg.synth.n_source = 60;
        cfg.synth.n_target = 60;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.loss.validate()?;
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if !(self.gaze.sigma_frac > 0.0) || !self.gaze.sigma_frac.is_finite() {
            return Err(Error::BadKernelWidth(self.gaze.sigma_frac));
        }
        if !(self.gaze.w_floor > 0.0 && self.gaze.w_floor <= 1.0) {
            return Err(Error::BadWeightFloor(self.gaze.w_floor));
        }
        if self.model.depth < 2 {
            return Err(Error::DepthTooSmall(self.model.depth));
        }
        if self.model.base_channels < 4 {
            return Err(Error::InvalidConfig(format!("base_channels must be >= 4, got {}", self.model.base_channels)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring `out_dir` so reruns into
    /// a fresh directory hash the same.
    pub fn hash(&self) -> String {
        let body = serde_json::to_vec(&RunConfig {
            out_dir: String::new(),
            ..self.clone()
        })
        .expect("config serializes");
        hex::encode(Sha256::digest(body))
    }

    /// Reads TOML (`.toml`) or JSON (anything else), layered over `base`:
    /// keys absent from the file keep their `base` value.
    pub fn load(path: &Path, base: &RunConfig) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Value = if path.extension().is_some_and(|e| e == "toml") {
            let t: toml::Value = toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
            serde_json::to_value(t).map_err(|e| Error::InvalidConfig(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
        };
        let mut merged = serde_json::to_value(base).expect("config serializes");
        merge(&mut merged, file, "")?;
        from_value(merged)
    }

    /// Applies `key=value` overrides with dotted keys (`optimizer.lr=1e-3`).
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("override {item:?} is not key=value")))?;
            set_path(&mut v, key.trim(), parse_scalar(raw.trim()))?;
        }
        from_value(v)
    }

    /// Every leaf key with its value, sorted by key.
    pub fn flattened(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        flatten(&serde_json::to_value(self).expect("config serializes"), "", &mut out);
        out
    }
}

fn from_value(v: Value) -> Result<RunConfig> {
    serde_json::from_value(v).map_err(|e| Error::InvalidConfig(e.to_string()))
}

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn merge(dst: &mut Value, src: Value, prefix: &str) -> Result<()> {
    match src {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let slot = dst
                    .as_object_mut()
                    .and_then(|o| o.get_mut(&k))
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown config key {key:?}")))?;
                if v.is_object() {
                    merge(slot, v, &key)?;
                } else {
                    *slot = v;
                }
            }
            Ok(())
        }
        _ => Err(Error::InvalidConfig("config root must be a table".into())),
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    for part in key.split('.') {
        cur = cur
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown config key {key:?}")))?;
    }
    if cur.is_object() {
        return Err(Error::InvalidConfig(format!("{key:?} is a section, not a value")));
    }
    *cur = value;
    Ok(())
}

fn flatten(v: &Value, prefix: &str, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(child, &key, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}
