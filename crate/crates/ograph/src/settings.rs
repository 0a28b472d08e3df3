//! Pipeline configuration files (TOML).

use std::path::{Path, PathBuf};

use ograph_core::{ConfigError, PipelineConfig};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SettingsError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error(transparent)]
    Invalid(#[from] ConfigError),
}

/// Parses and validates a config; missing keys take their defaults.
pub fn parse_config(text: &str) -> Result<PipelineConfig, SettingsError> {
    let cfg: PipelineConfig = toml::from_str(text).map_err(|source| SettingsError::Parse {
        path: PathBuf::from("<string>"),
        source,
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<PipelineConfig, SettingsError> {
    let text = std::fs::read_to_string(path).map_err(|source| SettingsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text).map_err(|e| match e {
        SettingsError::Parse { source, .. } => SettingsError::Parse {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

/// Defaults when no path is given.
pub fn load_or_default(path: Option<&Path>) -> Result<PipelineConfig, SettingsError> {
    match path {
        Some(p) => load_config(p),
        None => Ok(PipelineConfig::default()),
    }
}

pub fn to_toml(cfg: &PipelineConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ograph_core::UpAxis;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = parse_config("tau_r = 2.5\nup_axis = \"y\"\n").unwrap();
        assert_eq!(cfg.tau_r, 2.5);
        assert_eq!(cfg.up_axis, UpAxis::Y);
        assert_eq!(cfg.voxel_size, PipelineConfig::default().voxel_size);
    }

    #[test]
    fn round_trip() {
        let cfg = PipelineConfig {
            seed: 17,
            ..PipelineConfig::default()
        };
        assert_eq!(parse_config(&to_toml(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(parse_config("tau_rr = 1.0"), Err(SettingsError::Parse { .. })));
        assert!(matches!(parse_config("voxel_size = -1.0"), Err(SettingsError::Invalid(_))));
    }
}
