//! Application configuration: a TOML file with environment overrides, and
//! construction of the model clients it describes.
//!
//! ```toml
//! [transform]
//! kind = "random_crop"
//! param = 0.95
//! count = 10
//! seed = 0
//!
//! [pipeline]
//! instruction = "provide a short description of the image"
//! include_original_in_late = true
//!
//! [calibration]
//! early_percentile = 0.95
//! late_percentile = 0.99
//!
//! [backend]
//! kind = "http"
//!
//! [backend.encoder]
//! endpoint = "http://localhost:8000/v1"
//! model = "clip-vit-l-14"
//! # captioner, embedder and llm tables follow the same shape
//! ```
//!
//! For the `http` backend, `VLM_GUARD_<ROLE>_ENDPOINT`, `VLM_GUARD_<ROLE>_MODEL`
//! and `VLM_GUARD_<ROLE>_API_KEY` override the file, where `<ROLE>` is one of
//! `ENCODER`, `CAPTIONER`, `EMBEDDER`, `LLM`. `VLM_GUARD_API_KEY` supplies a
//! key to every role that has none.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::calibration::{DEFAULT_EARLY_PERCENTILE, DEFAULT_LATE_PERCENTILE};
use crate::clients::http::OpenAiClient;
use crate::clients::{ClientConfig, Clients, ConfigError};
use crate::pipeline::PipelineConfig;
use crate::synthetic::{FirstViewLlm, SyntheticCorpus, SyntheticError, SyntheticWorld, WorldParams};
use crate::transforms::{TransformError, TransformSpec};

pub const ENV_PREFIX: &str = "VLM_GUARD";

#[derive(Debug, Error)]
pub enum AppConfigError {
    #[error("config file not found: {0}")]
    Missing(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{role} client: {source}")]
    Client {
        role: Role,
        #[source]
        source: ConfigError,
    },
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Synthetic(#[from] SyntheticError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Encoder,
    Captioner,
    Embedder,
    Llm,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Encoder, Role::Captioner, Role::Embedder, Role::Llm];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Encoder => "encoder",
            Role::Captioner => "captioner",
            Role::Embedder => "embedder",
            Role::Llm => "llm",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s.to_ascii_lowercase())
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSettings {
    pub early_percentile: f64,
    pub late_percentile: f64,
    /// Use at most this many clean images for `tau_early`; all when unset.
    pub max_samples: Option<usize>,
    /// Use at most this many clean images for `tau_late`, which costs
    /// `K + 1` caption queries each; all when unset.
    pub late_samples: Option<usize>,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            early_percentile: DEFAULT_EARLY_PERCENTILE,
            late_percentile: DEFAULT_LATE_PERCENTILE,
            max_samples: None,
            late_samples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackend {
    pub encoder: ClientConfig,
    pub captioner: ClientConfig,
    pub embedder: ClientConfig,
    pub llm: ClientConfig,
}

impl HttpBackend {
    pub fn role_mut(&mut self, role: Role) -> &mut ClientConfig {
        match role {
            Role::Encoder => &mut self.encoder,
            Role::Captioner => &mut self.captioner,
            Role::Embedder => &mut self.embedder,
            Role::Llm => &mut self.llm,
        }
    }

    pub fn role(&self, role: Role) -> &ClientConfig {
        match role {
            Role::Encoder => &self.encoder,
            Role::Captioner => &self.captioner,
            Role::Embedder => &self.embedder,
            Role::Llm => &self.llm,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticBackend {
    /// Corpus whose images the synthetic models recognize. Commands that take
    /// a `--corpus` use that corpus instead.
    pub corpus: Option<PathBuf>,
    pub world: WorldParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backend {
    Http(Box<HttpBackend>),
    Synthetic(SyntheticBackend),
}

impl Default for Backend {
    fn default() -> Self {
        Backend::Synthetic(SyntheticBackend::default())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub transform: TransformSpec,
    pub pipeline: PipelineConfig,
    pub calibration: CalibrationSettings,
    pub backend: Backend,
}

impl AppConfig {
    pub fn from_toml(text: &str) -> Result<Self, AppConfigError> {
        let config: AppConfig = toml::from_str(text).map_err(|e| AppConfigError::Parse {
            path: "<inline>".into(),
            reason: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AppConfigError> {
        let path = path.as_ref();
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| {
            if source.kind() == std::io::ErrorKind::NotFound {
                AppConfigError::Missing(shown.clone())
            } else {
                AppConfigError::Io {
                    path: shown.clone(),
                    source,
                }
            }
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            AppConfigError::Parse { reason, .. } => AppConfigError::Parse { path: shown, reason },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), AppConfigError> {
        self.transform.validate()?;
        for (name, p) in [
            ("early_percentile", self.calibration.early_percentile),
            ("late_percentile", self.calibration.late_percentile),
        ] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(AppConfigError::Invalid(format!(
                    "calibration.{name} must be in (0, 1], got {p}"
                )));
            }
        }
        if self.pipeline.instruction.trim().is_empty() {
            return Err(AppConfigError::Invalid("pipeline.instruction is empty".into()));
        }
        if let Backend::Http(http) = &self.backend {
            for role in Role::ALL {
                http.role(role)
                    .validate()
                    .map_err(|source| AppConfigError::Client { role, source })?;
            }
        }
        Ok(())
    }

    /// Applies `VLM_GUARD_*` variables from `lookup` (usually `std::env::var`).
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), AppConfigError> {
        let Backend::Http(http) = &mut self.backend else {
            return Ok(());
        };
        let shared_key = lookup(&format!("{ENV_PREFIX}_API_KEY"));
        for role in Role::ALL {
            let var = |field: &str| lookup(&format!("{ENV_PREFIX}_{}_{field}", role.as_str().to_uppercase()));
            let cfg = http.role_mut(role);
            if let Some(endpoint) = var("ENDPOINT") {
                cfg.endpoint = parse_endpoint(&endpoint)?;
            }
            if let Some(model) = var("MODEL") {
                cfg.model = model;
            }
            if let Some(key) = var("API_KEY") {
                cfg.api_key = Some(key);
            } else if cfg.api_key.is_none() {
                cfg.api_key = shared_key.clone();
            }
        }
        Ok(())
    }

    /// Applies one `--endpoint` override: either `URL` for every role or
    /// `ROLE=URL` for one.
    pub fn apply_endpoint_override(&mut self, spec: &str) -> Result<(), AppConfigError> {
        let Backend::Http(http) = &mut self.backend else {
            return Err(AppConfigError::Invalid(
                "endpoint overrides need the http backend".into(),
            ));
        };
        match spec.split_once('=') {
            Some((role, url)) if Role::parse(role).is_some() => {
                http.role_mut(Role::parse(role).expect("checked")).endpoint = parse_endpoint(url)?;
            }
            _ => {
                let url = parse_endpoint(spec)?;
                for role in Role::ALL {
                    http.role_mut(role).endpoint = url.clone();
                }
            }
        }
        Ok(())
    }
}

fn parse_endpoint(s: &str) -> Result<Url, AppConfigError> {
    Url::parse(s).map_err(|e| AppConfigError::Invalid(format!("endpoint {s:?}: {e}")))
}

/// Constructed clients, plus the synthetic world when that backend is used.
pub struct Runtime {
    pub clients: Clients,
    pub world: Option<Arc<SyntheticWorld>>,
}

/// Builds the clients for `config`. For the synthetic backend, `corpus`
/// takes precedence over the corpus named in the config.
pub fn build_runtime(config: &AppConfig, corpus: Option<SyntheticCorpus>) -> Result<Runtime, AppConfigError> {
    match &config.backend {
        Backend::Http(http) => {
            let make = |role: Role| {
                OpenAiClient::new(http.role(role).clone())
                    .map(Arc::new)
                    .map_err(|source| AppConfigError::Client { role, source })
            };
            Ok(Runtime {
                clients: Clients {
                    encoder: make(Role::Encoder)?,
                    captioner: make(Role::Captioner)?,
                    embedder: make(Role::Embedder)?,
                    llm: make(Role::Llm)?,
                },
                world: None,
            })
        }
        Backend::Synthetic(synthetic) => {
            let corpus = match (corpus, &synthetic.corpus) {
                (Some(c), _) => c,
                (None, Some(path)) => SyntheticCorpus::load(path)?,
                (None, None) => {
                    return Err(AppConfigError::Invalid(
                        "synthetic backend needs a corpus (backend.corpus or --corpus)".into(),
                    ))
                }
            };
            let world = Arc::new(SyntheticWorld::new(corpus, config.transform, synthetic.world)?);
            Ok(Runtime {
                clients: world.clients(Arc::new(FirstViewLlm)),
                world: Some(world),
            })
        }
    }
}
