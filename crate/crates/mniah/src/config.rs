//! Declarative run configuration: endpoint roster, dataset paths, sweep
//! grids, seeds and cache location. Loaded from one TOML file; flags
//! override individual fields; credentials come only from environment
//! variables named in the roster.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

use crate::error::{Classify, ErrorClass};
use crate::llm::{mock, HttpTransport, LlmClient, ModelEndpoint, RetryPolicy, Transport};
use crate::runstore::{digest, RunStore};
use crate::taskgen;
use crate::tokenizer::TokenizerProfile;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("endpoint '{0}' appears twice in the roster")]
    DuplicateEndpoint(String),
    #[error("judge endpoint '{0}' is not in the roster")]
    UnknownJudge(String),
    #[error("endpoint '{name}' has unsupported base_url '{base_url}'")]
    BadBaseUrl { name: String, base_url: String },
    #[error("config field missing: {0}")]
    MissingField(&'static str),
    #[error(transparent)]
    Store(#[from] crate::runstore::StoreError),
    #[error(transparent)]
    Llm(#[from] crate::llm::LlmError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
}

impl Classify for ConfigError {
    fn class(&self) -> ErrorClass {
        match self {
            ConfigError::Store(e) => e.class(),
            ConfigError::Llm(e) => e.class(),
            _ => ErrorClass::Config,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(default)]
    pub hotpotqa: Option<PathBuf>,
    #[serde(default = "default_hotpot_sample")]
    pub hotpot_sample: usize,
    #[serde(default)]
    pub ire: Option<PathBuf>,
    #[serde(default)]
    pub filler: Vec<PathBuf>,
    /// The normalized items file (written by `build`, read downstream).
    #[serde(default)]
    pub items: Option<PathBuf>,
    #[serde(default)]
    pub problems: Option<PathBuf>,
}

fn default_hotpot_sample() -> usize {
    800
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            hotpotqa: None,
            hotpot_sample: default_hotpot_sample(),
            ire: None,
            filler: Vec::new(),
            items: None,
            problems: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    #[serde(default = "taskgen::default_length_grid")]
    pub lengths: Vec<usize>,
    #[serde(default = "taskgen::default_depth_grid")]
    pub depths: Vec<f64>,
    #[serde(default = "taskgen::default_distance_grid")]
    pub gaps: Vec<usize>,
    #[serde(default = "default_needle_interval")]
    pub needle_interval: usize,
    #[serde(default = "default_first_pos")]
    pub first_pos: usize,
    #[serde(default = "default_sweep_target")]
    pub sweep_target: usize,
    #[serde(default = "default_k")]
    pub k: u32,
}

fn default_needle_interval() -> usize {
    taskgen::DEFAULT_NEEDLE_INTERVAL_TOKENS
}

fn default_first_pos() -> usize {
    taskgen::DEFAULT_FIRST_POS_TOKENS
}

fn default_sweep_target() -> usize {
    taskgen::DEFAULT_SWEEP_TARGET_TOKENS
}

fn default_k() -> u32 {
    5
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            lengths: taskgen::default_length_grid(),
            depths: taskgen::default_depth_grid(),
            gaps: taskgen::default_distance_grid(),
            needle_interval: default_needle_interval(),
            first_pos: default_first_pos(),
            sweep_target: default_sweep_target(),
            k: default_k(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub tokenizer: TokenizerProfile,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Name of the roster entry used for verdicts.
    #[serde(default)]
    pub judge: Option<String>,
    #[serde(default)]
    pub endpoints: Vec<ModelEndpoint>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_seed() -> u64 {
    7
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from("run-store")
}

fn default_concurrency() -> usize {
    4
}

fn default_timeout_secs() -> u64 {
    crate::llm::transport::DEFAULT_TIMEOUT_SECS
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            tokenizer: TokenizerProfile::default(),
            cache_dir: default_cache_dir(),
            concurrency: default_concurrency(),
            timeout_secs: default_timeout_secs(),
            judge: None,
            endpoints: Vec::new(),
            data: DataConfig::default(),
            grid: GridConfig::default(),
            output_dir: default_output_dir(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
        let config: RunConfig = toml::from_str(&raw).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut names = std::collections::BTreeSet::new();
        for e in &self.endpoints {
            if !names.insert(e.name.as_str()) {
                return Err(ConfigError::DuplicateEndpoint(e.name.clone()));
            }
        }
        if let Some(judge) = &self.judge {
            if !names.contains(judge.as_str()) {
                return Err(ConfigError::UnknownJudge(judge.clone()));
            }
        }
        Ok(())
    }

    /// Short digest of the canonical serialized config; stamped into every
    /// output file.
    pub fn config_hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        digest(&[&canon])[..16].to_string()
    }

    pub fn judge_endpoint(&self) -> Result<&str, ConfigError> {
        self.judge
            .as_deref()
            .ok_or(ConfigError::MissingField("judge"))
    }

    /// Opens the run store and builds a client with every roster endpoint
    /// registered. Mock base URLs get the scripted offline model; http(s)
    /// URLs get the wire transport.
    pub fn build_client(&self, use_cache: bool) -> Result<(Arc<RunStore>, LlmClient), ConfigError> {
        let store = Arc::new(RunStore::open(&self.cache_dir, self.config_hash())?);
        let retry = if self.endpoints.iter().all(|e| e.base_url.starts_with("mock:")) {
            RetryPolicy::immediate()
        } else {
            RetryPolicy::default()
        };
        let mut client = LlmClient::new(store.clone())
            .with_retry(retry)
            .with_cache(use_cache);
        for endpoint in &self.endpoints {
            let transport = self.transport_for(endpoint)?;
            client.register(endpoint.clone(), transport, self.concurrency);
        }
        Ok((store, client))
    }

    fn transport_for(&self, endpoint: &ModelEndpoint) -> Result<Arc<dyn Transport>, ConfigError> {
        if let Some(rest) = endpoint.base_url.strip_prefix("mock:") {
            return match rest {
                "" | "offline" | "auto" => Ok(Arc::new(mock::offline_model())),
                other => Err(ConfigError::BadBaseUrl {
                    name: endpoint.name.clone(),
                    base_url: format!("mock:{other}"),
                }),
            };
        }
        if endpoint.base_url.starts_with("http://") || endpoint.base_url.starts_with("https://") {
            let transport = HttpTransport::from_endpoint(endpoint, self.timeout_secs)?;
            return Ok(Arc::new(transport));
        }
        Err(ConfigError::BadBaseUrl {
            name: endpoint.name.clone(),
            base_url: endpoint.base_url.clone(),
        })
    }
}
