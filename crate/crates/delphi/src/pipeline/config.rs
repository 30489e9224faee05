//! Run configuration: one TOML document drives a whole benchmark run.
//!
//! Unknown keys are rejected so that typos fail loudly instead of silently
//! falling back to defaults. Credentials never appear here; a non-mock
//! provider would read them from the environment.

use crate::aggregation::AggregationMethod;
use crate::benchkit::FilterConfig;
use crate::calibration::CalibrationMap;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config {path} is not valid: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config is not valid: {0}")]
    Invalid(String),
}

/// How agents gather evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// No searching; agents forecast from the question alone.
    None,
    /// One up-front query batch per agent, no follow-ups.
    NonAgentic,
    /// Agents interleave searches with reasoning, up to the stage cap.
    #[default]
    Agentic,
}

/// How the panel's disagreement is reconciled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SupervisorMode {
    /// No supervisor; the aggregate stands.
    None,
    /// The supervisor picks one of the panel's own forecasts.
    BestOfK,
    /// The supervisor revises in a single call without searching.
    NonAgentic,
    /// The supervisor summarizes disagreement, runs clarifying queries, then
    /// revises.
    #[default]
    Agentic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    /// Panel size per question.
    pub m_agents: u32,
    /// Hard cap on search stages per agent.
    pub max_search_stages: u32,
    pub search: SearchMode,
    /// Queries per agent under `search = "non_agentic"`.
    pub nonagentic_queries: u32,
    pub supervisor: SupervisorMode,
    /// Clarifying-query cap for the agentic supervisor; 0 skips the query
    /// step entirely.
    pub supervisor_query_cap: u32,
    pub aggregation: AggregationMethod,
    /// Show the question's market price to agents and supervisor.
    pub include_market_price: bool,
    /// Max results requested per search call.
    pub max_results: u32,
    pub max_concurrent_agents: u32,
    pub max_concurrent_questions: u32,
    /// Stop after this many newly processed questions (0 = no limit). The
    /// run can be resumed later; completed questions are never redone.
    pub question_limit: u32,
    /// Base seed recorded in the artifact for downstream resampling.
    pub seed: u64,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            m_agents: 10,
            max_search_stages: 8,
            search: SearchMode::default(),
            nonagentic_queries: 3,
            supervisor: SupervisorMode::default(),
            supervisor_query_cap: 3,
            aggregation: AggregationMethod::default(),
            include_market_price: false,
            max_results: 5,
            max_concurrent_agents: 4,
            max_concurrent_questions: 1,
            question_limit: 0,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProvidersSection {
    /// Only "mock" is supported; anything else is a configuration error.
    pub mode: String,
    /// Script file for the mock gateways, relative to the config file.
    pub script: PathBuf,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub retry_attempts: u32,
    pub retry_base_ms: u64,
    /// Concurrency cap at the gateway, across all questions and agents.
    pub max_in_flight: u32,
    /// Request budgets; 0 = unlimited. Exhaustion aborts the run.
    pub generation_budget: u64,
    pub search_budget: u64,
}

impl Default for ProvidersSection {
    fn default() -> Self {
        ProvidersSection {
            mode: "mock".to_string(),
            script: PathBuf::from("script.jsonl"),
            model: "forecaster-v1".to_string(),
            temperature: 0.7,
            max_tokens: 1024,
            retry_attempts: 3,
            retry_base_ms: 0,
            max_in_flight: 8,
            generation_budget: 0,
            search_budget: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlocklistSection {
    /// Block the known leak-prone source list shipped with the crate.
    pub use_leakage_list: bool,
    /// Also block prediction-market sites (hides the market's own view).
    pub hide_market_domains: bool,
    pub extra_domains: Vec<String>,
    pub extra_urls: Vec<String>,
}

impl Default for BlocklistSection {
    fn default() -> Self {
        BlocklistSection {
            use_leakage_list: true,
            hide_market_domains: false,
            extra_domains: Vec::new(),
            extra_urls: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeSection {
    /// Flagged-trace count at which a question is worst-case imputed.
    pub threshold: u32,
    pub model: String,
}

impl Default for JudgeSection {
    fn default() -> Self {
        JudgeSection {
            threshold: crate::integrity::WORST_CASE_THRESHOLD,
            model: "judge-v1".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapSection {
    /// Replicates for paired comparisons and weight intervals.
    pub n_replicates: u32,
    pub seed: u64,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        BootstrapSection {
            n_replicates: 1000,
            seed: 13,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    /// Replicates for ensemble-size curves.
    pub n_replicates: u32,
    /// Sub-panel sizes to evaluate; empty = 1..=m_agents.
    pub sizes: Vec<u32>,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection {
            n_replicates: 500,
            sizes: Vec::new(),
        }
    }
}

/// The full run configuration. Every section has defaults, so `[pipeline]`
/// alone (or even an empty document) is a valid config.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub pipeline: PipelineSection,
    pub calibration: CalibrationMap,
    pub providers: ProvidersSection,
    pub blocklists: BlocklistSection,
    pub judge: JudgeSection,
    pub bootstrap: BootstrapSection,
    pub ensemble: EnsembleSection,
    /// Market filters for benchmark construction.
    pub bench: FilterConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<RunConfig, ConfigError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Read and validate a config file; returns the parsed config together
    /// with the raw bytes (artifacts store the config byte-for-byte).
    pub fn load(path: &Path) -> Result<(RunConfig, Vec<u8>), ConfigError> {
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let text = String::from_utf8_lossy(&bytes);
        let config = RunConfig::from_toml_str(&text, path)?;
        Ok((config, bytes))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.providers.mode != "mock" {
            return Err(ConfigError::Invalid(format!(
                "providers.mode {:?} is not supported (only \"mock\")",
                self.providers.mode
            )));
        }
        if self.pipeline.m_agents == 0 {
            return Err(ConfigError::Invalid("pipeline.m_agents must be at least 1".into()));
        }
        if self.pipeline.search == SearchMode::Agentic && self.pipeline.max_search_stages == 0 {
            return Err(ConfigError::Invalid(
                "pipeline.max_search_stages must be at least 1 under agentic search".into(),
            ));
        }
        if self.pipeline.search == SearchMode::NonAgentic && self.pipeline.nonagentic_queries == 0
        {
            return Err(ConfigError::Invalid(
                "pipeline.nonagentic_queries must be at least 1 under non-agentic search".into(),
            ));
        }
        if self.pipeline.max_results == 0 {
            return Err(ConfigError::Invalid("pipeline.max_results must be at least 1".into()));
        }
        if self.judge.threshold == 0 {
            return Err(ConfigError::Invalid("judge.threshold must be at least 1".into()));
        }
        if !(0.0..=2.0).contains(&self.providers.temperature) {
            return Err(ConfigError::Invalid(
                "providers.temperature must be in [0, 2]".into(),
            ));
        }
        self.calibration
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("calibration: {e}")))?;
        Ok(())
    }

    /// The script path resolved against the config file's directory.
    pub fn script_path(&self, config_path: &Path) -> PathBuf {
        if self.providers.script.is_absolute() {
            self.providers.script.clone()
        } else {
            config_path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(&self.providers.script)
        }
    }
}
