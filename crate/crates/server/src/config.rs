use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use elicit_core::ingest::IngestConfig;
use elicit_core::provider::{ConfigError as ProviderConfigError, ProviderConfig};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config file {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error(transparent)]
    Provider(#[from] ProviderConfigError),
}

/// Server settings read from a TOML file. Command-line flags override
/// `listen`, `data_dir` and `bank`.
///
/// Secrets never live here: the provider key and the optional shared access
/// token are read from the environment variables the file names.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    pub data_dir: PathBuf,
    /// Predefined question bank; the built-in bank is used when unset.
    pub bank: Option<PathBuf>,
    /// Environment variable holding a shared bearer token. Unset means
    /// session ids alone grant access.
    pub auth_token_env: Option<String>,
    pub max_upload_bytes: usize,
    /// Fixed seed for every new session; random per session when unset.
    pub seed: Option<u64>,
    pub history_budget: usize,
    pub provider: ProviderConfig,
    pub ingest: IngestConfig,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            data_dir: PathBuf::from("data"),
            bank: None,
            auth_token_env: None,
            max_upload_bytes: 32 * 1024 * 1024,
            seed: None,
            history_budget: 1_500,
            provider: ProviderConfig::default(),
            ingest: IngestConfig::default(),
        }
    }
}

impl ServerConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let config: ServerConfig = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        config.provider.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }
}
