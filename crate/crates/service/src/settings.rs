//! Service settings: built-in defaults, then the config file, then
//! environment variables and command-line flags.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use memstrata_core::providers::{RemoteConfig, RemoteProvider};
use memstrata_core::{validate_config, Config, Provider, RawConfig};
use serde::Deserialize;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";
pub const DEFAULT_DATA_DIR: &str = "./memstrata-data";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Stub,
    Remote,
}

/// Contents of the TOML config file. Every key is optional.
///
/// ```toml
/// listen = "0.0.0.0:8080"
/// data_dir = "/var/lib/memstrata"
/// provider = "remote"
/// bearer_token = "secret"
///
/// [engine]
/// stm_capacity = 7
/// theta = 0.6
/// ```
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileSettings {
    pub listen: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub provider: Option<ProviderKind>,
    pub bearer_token: Option<String>,
    pub engine: RawConfig,
}

impl FileSettings {
    pub fn from_path(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Values that take precedence over the file, already merged from flags and
/// environment by the CLI parser.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub listen: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub provider: Option<ProviderKind>,
    pub bearer_token: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub listen: SocketAddr,
    pub data_dir: PathBuf,
    pub provider: ProviderKind,
    pub bearer_token: Option<String>,
    pub engine: Config,
}

impl Settings {
    pub fn resolve(overrides: Overrides) -> anyhow::Result<Self> {
        let file = match &overrides.config {
            Some(path) => FileSettings::from_path(path)?,
            None => FileSettings::default(),
        };
        let listen = overrides.listen.or(file.listen).unwrap_or_else(|| DEFAULT_LISTEN.into());
        let listen = listen.parse().with_context(|| format!("invalid listen address `{listen}`"))?;
        let engine = validate_config(file.engine)?;
        Ok(Self {
            listen,
            data_dir: overrides.data_dir.or(file.data_dir).unwrap_or_else(|| DEFAULT_DATA_DIR.into()),
            provider: overrides.provider.or(file.provider).unwrap_or(ProviderKind::Stub),
            bearer_token: overrides.bearer_token.or(file.bearer_token).filter(|t| !t.is_empty()),
            engine,
        })
    }

    /// Construct the provider. Must not be called from inside an async runtime
    /// when `provider` is remote, because the HTTP client is blocking.
    pub fn build_provider(&self) -> anyhow::Result<Provider> {
        let provider = match self.provider {
            ProviderKind::Stub => Provider::stub(),
            ProviderKind::Remote => {
                let remote = RemoteProvider::new(RemoteConfig::from_env()?)?;
                Provider::new(Arc::new(remote))
            }
        };
        if provider.dimension() != self.engine.embedding_dim {
            bail!(
                "provider produces {}-dimensional embeddings but engine.embedding_dim is {}",
                provider.dimension(),
                self.engine.embedding_dim
            );
        }
        Ok(provider)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_without_file() {
        let s = Settings::resolve(Overrides::default()).unwrap();
        assert_eq!(s.listen.to_string(), DEFAULT_LISTEN);
        assert_eq!(s.provider, ProviderKind::Stub);
        assert_eq!(s.engine, Config::default());
        assert!(s.bearer_token.is_none());
    }

    #[test]
    fn flags_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.toml");
        std::fs::write(
            &path,
            "listen = \"0.0.0.0:9000\"\ndata_dir = \"/tmp/a\"\nbearer_token = \"t\"\n[engine]\nstm_capacity = 3\n",
        )
        .unwrap();
        let s = Settings::resolve(Overrides {
            config: Some(path.clone()),
            data_dir: Some("/tmp/b".into()),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(s.listen.port(), 9000);
        assert_eq!(s.data_dir, PathBuf::from("/tmp/b"));
        assert_eq!(s.engine.stm_capacity, 3);
        assert_eq!(s.bearer_token.as_deref(), Some("t"));
    }

    #[test]
    fn bad_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.toml");
        std::fs::write(&path, "[engine]\ntheta = 9.0\n").unwrap();
        let err = Settings::resolve(Overrides { config: Some(path.clone()), ..Default::default() }).unwrap_err();
        assert!(format!("{err:#}").contains("theta"));
        std::fs::write(&path, "colour = 1\n").unwrap();
        assert!(Settings::resolve(Overrides { config: Some(path), ..Default::default() }).is_err());
    }
}
