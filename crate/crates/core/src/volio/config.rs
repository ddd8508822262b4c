//! Registration-config JSON: the [`RegistrationConfig`] fields plus an RNG
//! seed for the synthetic-data commands.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::RegistrationConfig;
use crate::volio::atomic_write;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfigFile {
    #[serde(flatten)]
    pub config: RegistrationConfig,
    pub seed: u64,
}

impl Default for RegistrationConfigFile {
    fn default() -> Self {
        RegistrationConfigFile { config: RegistrationConfig::default(), seed: 0 }
    }
}

pub fn read_config(path: &Path) -> Result<RegistrationConfigFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    let file: RegistrationConfigFile =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("config: {e}")))?;
    file.config.validate()?;
    Ok(file)
}

pub fn write_config(cfg: &RegistrationConfigFile, path: &Path) -> Result<()> {
    cfg.config.validate()?;
    let mut text = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::Format(format!("config serialization: {e}")))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_defaults() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let cfg = RegistrationConfigFile { seed: 42, ..Default::default() };
        write_config(&cfg, &path).unwrap();
        let back = read_config(&path).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"alpha": 0.5, "seed": 7}"#).unwrap();
        let cfg = read_config(&path).unwrap();
        assert_eq!(cfg.config.alpha, 0.5);
        assert_eq!(cfg.config.levels, 2);
        assert_eq!(cfg.config.grid_size, [31, 31, 31]);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"alpha": -1.0}"#).unwrap();
        assert!(read_config(&path).is_err());
        std::fs::write(&path, r#"{"ngf": {"epsilon": 0.0}}"#).unwrap();
        assert!(read_config(&path).is_err());
    }
}
