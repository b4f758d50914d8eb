//! Run configuration: a JSON document that binds the federated setup, the
//! privacy target, the codec and the estimator, with unknown keys rejected.

use std::path::Path;

use privlora_core::fed::{CodecSettings, FedConfig, LocalConfig, ToySpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::io;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub fed: FedConfig,
}

impl RunConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: RunConfig = privlora_core::json::from_slice(bytes)?;
        cfg.fed.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config; `seed` replaces the file's seed.
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self> {
        let bytes = io::read(path).map_err(|e| match e {
            CliError::MissingArtifact(p) => CliError::config(format!("config file {} not found", p.display())),
            other => other,
        })?;
        let mut cfg = Self::from_json(&bytes)?;
        if let Some(s) = seed {
            cfg.fed.seed = s;
        }
        Ok(cfg)
    }
}

/// The part of the configuration that determines the pretrained codec.
#[derive(Serialize)]
struct CodecKey<'a> {
    task: &'a ToySpec,
    local: &'a LocalConfig,
    codec: &'a CodecSettings,
    seed: u64,
}

/// SHA-256 over everything that shapes the codec. Privacy and round settings
/// are excluded so one codec serves a whole privacy sweep.
pub fn codec_hash(cfg: &FedConfig) -> String {
    let key = CodecKey {
        task: &cfg.task,
        local: &cfg.local,
        codec: &cfg.codec,
        seed: cfg.seed,
    };
    let bytes = serde_json::to_vec(&key).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use privlora_core::fed::Privacy;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_json(b"{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [&br#"{"fedd": {}}"#[..], br#"{"fed": {"rounds": 3, "round": 4}}"#, br#"{"fed": {"task": {"width": 3}}}"#] {
            assert!(matches!(RunConfig::from_json(doc), Err(CliError::Config(_))));
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let doc = br#"{"fed": {"p": 1.5}}"#;
        assert!(matches!(RunConfig::from_json(doc), Err(CliError::Config(_))));
    }

    #[test]
    fn hash_ignores_privacy_but_not_codec_inputs() {
        let a = FedConfig::default();
        let b = FedConfig {
            privacy: Privacy::FixedSigma { sigma: 3.0, delta: 1e-3 },
            rounds: 3,
            ..a.clone()
        };
        assert_eq!(codec_hash(&a), codec_hash(&b));
        let c = FedConfig { seed: 9, ..a.clone() };
        assert_ne!(codec_hash(&a), codec_hash(&c));
        assert_eq!(codec_hash(&a).len(), 64);
    }
}
