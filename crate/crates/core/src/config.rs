//! Application configuration: the provider/embedder registries, defaults,
//! and the sweep-spec file for evaluation runs. Unknown keys are rejected
//! at load time, and a run that references a missing provider fails here,
//! not mid-run.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenCounter, WhitespacePunctCounter};
use crate::needle::PlacementMode;
use crate::provider::mock::{HashEmbedder, MockChatProvider, MockScript};
use crate::provider::{ChatProvider, EmbeddingProvider, ProviderConfig, RetryPolicy};
use crate::store::hash_bytes;

/// Default context-length grid for evaluation sweeps, in tokens.
pub const DEFAULT_CONTEXT_GRID: [usize; 5] = [2_048, 8_192, 32_768, 65_536, 131_072];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("provider `{0}` is not in the registry")]
    UnknownProvider(String),
    #[error("embedder `{0}` is not in the registry")]
    UnknownEmbedder(String),
    #[error("duplicate provider name `{0}`")]
    DuplicateProvider(String),
    #[error("provider `{name}` is invalid: {message}")]
    BadProvider { name: String, message: String },
    #[error("judge provider `{0}` must run at temperature 0")]
    JudgeTemperature(String),
    #[error("unknown placement mode `{0}` (expected multi, single40, or single60)")]
    BadMode(String),
    #[error("http providers need the `http` build feature; `{0}` is configured as openai")]
    HttpDisabled(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Mock,
    Openai,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderEntry {
    pub name: String,
    pub kind: ProviderKind,
    pub model: String,
    #[serde(default)]
    pub endpoint: String,
    pub max_context_tokens: usize,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Matcher table for mock providers.
    #[serde(default)]
    pub script: Option<MockScript>,
}

fn default_parallel() -> usize {
    1
}

fn default_timeout() -> u64 {
    60
}

impl ProviderEntry {
    pub fn provider_config(&self) -> ProviderConfig {
        ProviderConfig {
            name: self.name.clone(),
            model: self.model.clone(),
            endpoint: self.endpoint.clone(),
            max_context_tokens: self.max_context_tokens,
            temperature: self.temperature,
            max_parallel: self.max_parallel,
            retry: self.retry.clone(),
            timeout_secs: self.timeout_secs,
            api_key_env: self.api_key_env.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Hash,
    Openai,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderEntry {
    pub name: String,
    pub kind: EmbedderKind,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
}

fn default_dim() -> usize {
    16
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_counter")]
    pub counter: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_grid")]
    pub context_lengths: Vec<usize>,
    #[serde(default)]
    pub default_provider: Option<String>,
    #[serde(default)]
    pub default_judge: Option<String>,
    #[serde(default)]
    pub default_embedder: Option<String>,
    #[serde(default)]
    pub providers: Vec<ProviderEntry>,
    #[serde(default)]
    pub embedders: Vec<EmbedderEntry>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_counter() -> String {
    "whitespace-punct".into()
}

fn default_grid() -> Vec<usize> {
    DEFAULT_CONTEXT_GRID.to_vec()
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            output_dir: default_output_dir(),
            counter: default_counter(),
            seed: 0,
            context_lengths: default_grid(),
            default_provider: None,
            default_judge: None,
            default_embedder: None,
            providers: Vec::new(),
            embedders: Vec::new(),
        }
    }
}

impl AppConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.providers {
            if !seen.insert(p.name.clone()) {
                return Err(ConfigError::DuplicateProvider(p.name.clone()));
            }
            p.provider_config()
                .validate()
                .map_err(|e| ConfigError::BadProvider {
                    name: p.name.clone(),
                    message: e.to_string(),
                })?;
        }
        for name in [&self.default_provider, &self.default_judge] {
            if let Some(name) = name {
                self.provider_entry(name)?;
            }
        }
        if let Some(name) = &self.default_embedder {
            self.embedder_entry(name)?;
        }
        if let Some(judge) = &self.default_judge {
            let entry = self.provider_entry(judge)?;
            if entry.temperature != 0.0 {
                return Err(ConfigError::JudgeTemperature(judge.clone()));
            }
        }
        Ok(())
    }

    pub fn provider_entry(&self, name: &str) -> Result<&ProviderEntry, ConfigError> {
        self.providers
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| ConfigError::UnknownProvider(name.to_string()))
    }

    pub fn embedder_entry(&self, name: &str) -> Result<&EmbedderEntry, ConfigError> {
        self.embedders
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| ConfigError::UnknownEmbedder(name.to_string()))
    }

    pub fn counter(&self) -> Arc<dyn TokenCounter> {
        Arc::new(WhitespacePunctCounter)
    }

    /// Instantiates a chat provider from its registry entry.
    pub fn chat_provider(&self, name: &str) -> Result<Arc<dyn ChatProvider>, ConfigError> {
        let entry = self.provider_entry(name)?;
        match entry.kind {
            ProviderKind::Mock => {
                let script = entry.script.clone().unwrap_or_default();
                Ok(Arc::new(MockChatProvider::new(
                    entry.provider_config(),
                    script,
                )))
            }
            ProviderKind::Openai => {
                #[cfg(feature = "http")]
                {
                    let provider =
                        crate::provider::http::HttpChatProvider::new(entry.provider_config())
                            .map_err(|e| ConfigError::BadProvider {
                                name: entry.name.clone(),
                                message: e.to_string(),
                            })?;
                    Ok(Arc::new(provider))
                }
                #[cfg(not(feature = "http"))]
                {
                    Err(ConfigError::HttpDisabled(entry.name.clone()))
                }
            }
        }
    }

    pub fn embedding_provider(
        &self,
        name: &str,
    ) -> Result<Arc<dyn EmbeddingProvider>, ConfigError> {
        let entry = self.embedder_entry(name)?;
        match entry.kind {
            EmbedderKind::Hash => Ok(Arc::new(HashEmbedder::new(&entry.name, entry.dim))),
            EmbedderKind::Openai => {
                #[cfg(feature = "http")]
                {
                    let config = ProviderConfig {
                        name: entry.name.clone(),
                        model: entry.model.clone(),
                        endpoint: entry.endpoint.clone(),
                        max_context_tokens: 1_000_000,
                        temperature: 0.0,
                        max_parallel: 1,
                        retry: RetryPolicy::default(),
                        timeout_secs: 60,
                        api_key_env: entry.api_key_env.clone(),
                    };
                    let provider =
                        crate::provider::http::HttpEmbeddingProvider::new(config, entry.dim)
                            .map_err(|e| ConfigError::BadProvider {
                                name: entry.name.clone(),
                                message: e.to_string(),
                            })?;
                    Ok(Arc::new(provider))
                }
                #[cfg(not(feature = "http"))]
                {
                    Err(ConfigError::HttpDisabled(entry.name.clone()))
                }
            }
        }
    }
}

/// Loads and validates the TOML config.
pub fn load_config(path: impl AsRef<Path>) -> Result<AppConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<AppConfig, ConfigError> {
    let config: AppConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Content hash of a config file's text, recorded in run manifests.
pub fn config_hash(text: &str) -> String {
    hash_bytes(text.as_bytes())
}

/// The sweep-spec file consumed by an evaluation run: provider names
/// resolved against the registry, fixture paths resolved against the spec
/// file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NiahSpecFile {
    pub providers: Vec<String>,
    pub judge: String,
    pub pairs: PathBuf,
    pub corpora: Vec<PathBuf>,
    pub context_lengths: Vec<usize>,
    pub modes: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

impl NiahSpecFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut spec: NiahSpecFile =
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        spec.pairs = base.join(&spec.pairs);
        spec.corpora = spec.corpora.iter().map(|c| base.join(c)).collect();
        Ok(spec)
    }

    pub fn placement_modes(&self) -> Result<Vec<PlacementMode>, ConfigError> {
        self.modes
            .iter()
            .map(|m| PlacementMode::from_label(m).ok_or_else(|| ConfigError::BadMode(m.clone())))
            .collect()
    }

    /// Fails when any referenced provider is missing from the registry.
    pub fn resolve_providers(&self, config: &AppConfig) -> Result<(), ConfigError> {
        for name in &self.providers {
            config.provider_entry(name)?;
        }
        config.provider_entry(&self.judge)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[[providers]]
name = "mock-a"
kind = "mock"
model = "mock-model"
max_context_tokens = 8192

[providers.script]
default_response = "ok"
"#;

    #[test]
    fn minimal_config_loads() {
        let config = parse_config(MINIMAL).unwrap();
        assert_eq!(config.providers.len(), 1);
        assert_eq!(config.context_lengths, DEFAULT_CONTEXT_GRID.to_vec());
        let provider = config.chat_provider("mock-a").unwrap();
        assert_eq!(provider.config().name, "mock-a");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config("unknown_key = 1\n").unwrap_err();
        match err {
            ConfigError::Parse(message) => assert!(message.contains("unknown_key")),
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn missing_provider_fails_at_load() {
        let text = format!("{MINIMAL}\ndefault_judge = \"nope\"\n");
        let err = parse_config(&text).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownProvider(name) if name == "nope"));
    }

    #[test]
    fn judge_must_be_temperature_zero() {
        let text = r#"
default_judge = "warm"

[[providers]]
name = "warm"
kind = "mock"
model = "m"
max_context_tokens = 1000
temperature = 0.7
"#;
        assert!(matches!(
            parse_config(text),
            Err(ConfigError::JudgeTemperature(_))
        ));
    }

    #[test]
    fn duplicate_provider_names_rejected() {
        let text = r#"
[[providers]]
name = "a"
kind = "mock"
model = "m"
max_context_tokens = 10

[[providers]]
name = "a"
kind = "mock"
model = "m"
max_context_tokens = 10
"#;
        assert!(matches!(
            parse_config(text),
            Err(ConfigError::DuplicateProvider(_))
        ));
    }
}
