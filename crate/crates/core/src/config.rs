//! Run configuration: a TOML document with `data`, `model`, `losses`,
//! `train` and `eval` sections, environment overrides and content hashes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::synth::SynthConfig;
use crate::trainer::{LossConfig, TrainConfig};

/// Prefix of environment variables overriding config keys, e.g.
/// `ADML__TRAIN__EPOCHS=5` or `ADML__LOSSES__ADV__LAMBDA=0.2`.
pub const ENV_PREFIX: &str = "ADML__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub neg_ratio: usize,
    /// Seed of the negative-trial draw.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { neg_ratio: 50, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub model: EncoderConfig,
    pub losses: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Loads `path` (or defaults), then applies environment overrides.
    pub fn resolve(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        let base: Self = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let mut value = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in env {
            if let Some(path) = k.strip_prefix(ENV_PREFIX) {
                apply_override(&mut value, path, &v)?;
            }
        }
        let cfg: Self = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.losses.validate()?;
        self.train.validate()?;
        if self.data.vocab_size != self.model.vocab_size {
            return Err(Error::Config(format!(
                "data.vocab_size {} != model.vocab_size {}",
                self.data.vocab_size, self.model.vocab_size
            )));
        }
        if self.data.feature_dim != self.model.feature_dim {
            return Err(Error::Config(format!(
                "data.feature_dim {} != model.feature_dim {}",
                self.data.feature_dim, self.model.feature_dim
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    /// Hash of everything that shapes a trained model, i.e. all but `eval`.
    pub fn training_hash(&self) -> String {
        let mut c = self.clone();
        c.eval = EvalConfig::default();
        c.hash()
    }

    /// Hash of the data section alone; identifies a corpus.
    pub fn data_hash(&self) -> String {
        data_hash(&self.data)
    }
}

pub fn data_hash(data: &SynthConfig) -> String {
    sha256_hex(toml::to_string(data).expect("data serializes").as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// `path` is `SECTION__KEY` (further `__` for nested tables), matched
/// case-insensitively against lowercase keys.
fn apply_override(root: &mut toml::Value, path: &str, raw: &str) -> Result<()> {
    let keys: Vec<String> = path.split("__").map(str::to_lowercase).collect();
    let (last, parents) = keys
        .split_last()
        .ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut node = root;
    for k in parents {
        node = node
            .get_mut(k)
            .filter(|n| n.is_table())
            .ok_or_else(|| Error::Config(format!("override {ENV_PREFIX}{path}: unknown section `{k}`")))?;
    }
    let table = node.as_table_mut().expect("checked table");
    if !table.contains_key(last) {
        return Err(Error::Config(format!(
            "override {ENV_PREFIX}{path}: unknown key `{last}`"
        )));
    }
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    table.insert(last.clone(), parsed);
    Ok(())
}
