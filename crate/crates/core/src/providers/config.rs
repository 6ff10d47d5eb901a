//! Provider configuration (TOML or JSON). Credentials are never part of the
//! file: each endpoint names the environment variable that holds its key.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHAT_KEY_ENV: &str = "POEMPIXEL_CHAT_KEY";
pub const IMAGE_KEY_ENV: &str = "POEMPIXEL_IMAGE_KEY";
pub const SCORER_KEY_ENV: &str = "POEMPIXEL_SCORER_KEY";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid provider config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("{endpoint}: {message}")]
    Invalid {
        endpoint: &'static str,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Live,
    #[default]
    Mock,
}

fn default_timeout() -> u64 {
    60
}

fn default_concurrency() -> usize {
    super::limit::DEFAULT_CONCURRENCY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    #[serde(default)]
    pub kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credential_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests_per_second: Option<f64>,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Mock,
            base_url: None,
            model: None,
            credential_env: None,
            timeout_secs: default_timeout(),
            concurrency: default_concurrency(),
            requests_per_second: None,
        }
    }
}

impl EndpointConfig {
    pub fn is_live(&self) -> bool {
        self.kind == ProviderKind::Live
    }

    fn validate(&self, endpoint: &'static str) -> Result<(), ConfigError> {
        let invalid = |message: &str| ConfigError::Invalid {
            endpoint,
            message: message.to_string(),
        };
        if self.concurrency == 0 {
            return Err(invalid("concurrency must be at least 1"));
        }
        if self.timeout_secs == 0 {
            return Err(invalid("timeout_secs must be at least 1"));
        }
        if self.is_live() && self.base_url.as_deref().map_or(true, str::is_empty) {
            return Err(invalid("live provider requires base_url"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    #[serde(default)]
    pub chat: EndpointConfig,
    #[serde(default)]
    pub embedding: EndpointConfig,
    #[serde(default)]
    pub image: EndpointConfig,
    #[serde(default)]
    pub scorer: EndpointConfig,
}

impl ProviderConfig {
    pub fn all_mock() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let is_json = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let parsed: Result<Self, String> = if is_json {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        let cfg = parsed.map_err(|message| ConfigError::Parse {
            path: path.display().to_string(),
            message,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.chat.validate("chat")?;
        self.embedding.validate("embedding")?;
        self.image.validate("image")?;
        self.scorer.validate("scorer")
    }

    /// Environment variable holding the credential for an endpoint, falling
    /// back to the standard `POEMPIXEL_*` names.
    pub fn credential_env(&self, endpoint: &str) -> String {
        let (cfg, fallback) = match endpoint {
            "chat" => (&self.chat, CHAT_KEY_ENV),
            "embedding" => (&self.embedding, CHAT_KEY_ENV),
            "image" => (&self.image, IMAGE_KEY_ENV),
            _ => (&self.scorer, SCORER_KEY_ENV),
        };
        cfg.credential_env
            .clone()
            .unwrap_or_else(|| fallback.to_string())
    }
}
