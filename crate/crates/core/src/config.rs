//! Whole-run configuration, TOML loading and a key-order independent hash.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalkit::FeatureMode;
use crate::lifelong::TrainConfig;
use crate::model::ModelConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub feature: FeatureMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Task-stream file; relative paths inside it resolve against its directory.
    pub stream: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            stream: None,
            out_dir: None,
        }
    }
}

fn unknown_key(msg: &str) -> String {
    msg.split("unknown field `")
        .nth(1)
        .and_then(|rest| rest.split('`').next())
        .map_or_else(|| "<config>".to_string(), str::to_string)
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            Error::Config { key: unknown_key(&msg), msg }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.feature == FeatureMode::GlobalAndAttribute && self.model.disable_acn {
            return Err(Error::Config {
                key: "eval.feature".into(),
                msg: "attribute-wise features need the compensation network".into(),
            });
        }
        Ok(())
    }

    /// SHA-256 over a canonical (sorted-key) JSON rendering; unaffected by key order in the file
    /// and by where outputs are written.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(RunConfig { out_dir: None, ..self.clone() }).expect("config serialises to JSON");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn apply(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::NoAtg => self.model.caption.use_attributes = false,
            Ablation::NoAf => self.train.anti_forgetting = false,
            Ablation::NoKc => self.train.consolidation = false,
            Ablation::NoPfm => self.model.disable_pfm = true,
            Ablation::NoAcn => {
                self.model.disable_acn = true;
                self.train.anti_forgetting = false;
                self.eval.feature = FeatureMode::Global;
            }
        }
    }
}

/// Components that can be switched off for ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Generic caption for every image.
    NoAtg,
    NoAf,
    NoKc,
    NoPfm,
    NoAcn,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::NoAtg, Ablation::NoAf, Ablation::NoKc, Ablation::NoPfm, Ablation::NoAcn];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoAtg => "no-atg",
            Ablation::NoAf => "no-af",
            Ablation::NoKc => "no-kc",
            Ablation::NoPfm => "no-pfm",
            Ablation::NoAcn => "no-acn",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order() {
        let a = RunConfig::from_toml_str("seed = 3\n[train]\nepochs = 2\nlr = 0.01\n").unwrap();
        let b = RunConfig::from_toml_str("[train]\nlr = 0.01\nepochs = 2\n\n[eval]\n").unwrap();
        let b = RunConfig { seed: 3, ..b };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), RunConfig::default().hash());
        let moved = RunConfig { out_dir: Some("elsewhere".into()), ..a.clone() };
        assert_eq!(moved.hash(), a.hash());
    }

    #[test]
    fn unknown_keys_are_named() {
        match RunConfig::from_toml_str("[train]\nepochz = 2\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "epochz"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply(Ablation::NoKc);
        let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn invalid_values_name_their_key() {
        match RunConfig::from_toml_str("[train]\ntemperature = -1.0\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "train.temperature"),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
