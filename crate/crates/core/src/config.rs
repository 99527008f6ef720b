//! Versioned run configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Channel;
use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    pub channel: Channel,
    /// Retrieved entries per example.
    pub k: usize,
    /// Token budget for input plus context.
    pub budget: usize,
    pub dim: usize,
    pub window: usize,
    /// Weight of the cross-view alignment term; `0` disables it.
    pub lambda: f64,
    /// Apply the alignment term to relation models too.
    pub align_re: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub moe_epochs: usize,
    pub batch_size: usize,
    pub moe_batch_size: usize,
    /// Minimum document frequency for encoder vocabulary tokens.
    pub min_df: usize,
    pub init_scale: f64,
    pub seed: u64,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    pub normalize_vectors: bool,
    pub none_label: String,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            version: CONFIG_VERSION,
            channel: Channel::Text,
            k: 10,
            budget: crate::context::DEFAULT_BUDGET,
            dim: crate::encoder::DEFAULT_DIM,
            window: crate::encoder::DEFAULT_WINDOW,
            lambda: 1.0,
            align_re: true,
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 10,
            moe_epochs: 50,
            batch_size: 4,
            moe_batch_size: 64,
            min_df: 1,
            init_scale: 0.1,
            seed: 0,
            bm25_k1: 1.2,
            bm25_b: 0.75,
            normalize_vectors: true,
            none_label: "none".into(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let version = raw
            .get("version")
            .and_then(toml::Value::as_integer)
            .ok_or_else(|| Error::Config("missing integer key `version`".into()))?;
        if version != i64::from(CONFIG_VERSION) {
            return Err(Error::Version {
                what: "config".into(),
                expected: CONFIG_VERSION,
                found: u32::try_from(version).unwrap_or(u32::MAX),
            });
        }
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.budget == 0 {
            return bad("budget must be positive");
        }
        if self.batch_size == 0 || self.moe_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps be positive");
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be finite and non-negative");
        }
        if !(self.bm25_k1 >= 0.0) || !(0.0..=1.0).contains(&self.bm25_b) {
            return bad("bm25_k1 must be non-negative and bm25_b in [0, 1]");
        }
        if self.none_label.is_empty() {
            return bad("none_label must be non-empty");
        }
        if i64::try_from(self.seed).is_err() {
            return bad("seed must fit in a signed 64-bit integer");
        }
        Ok(())
    }

    pub fn bm25(&self) -> crate::text_index::Bm25Params {
        crate::text_index::Bm25Params {
            k1: self.bm25_k1,
            b: self.bm25_b,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = Config::default();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = Config::from_toml("version = 1\nk = 3\nchannel = \"image\"\n").unwrap();
        assert_eq!(c.k, 3);
        assert_eq!(c.channel, Channel::Image);
        assert_eq!(c.lr, 1e-3);
    }

    #[test]
    fn version_required_and_checked() {
        assert_eq!(Config::from_toml("k = 3").unwrap_err().code(), "E_CONFIG");
        assert_eq!(Config::from_toml("version = 2").unwrap_err().code(), "E_VERSION");
    }

    #[test]
    fn unknown_and_invalid_keys() {
        assert!(Config::from_toml("version = 1\nfoo = 1").is_err());
        assert!(Config::from_toml("version = 1\nbatch_size = 0").is_err());
        assert!(Config::from_toml("version = 1\nlambda = -1.0").is_err());
    }
}
