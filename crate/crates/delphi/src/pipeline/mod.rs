//! The forecasting pipeline: a panel of agents per question, an optional
//! supervisor, calibration, and a resumable on-disk run artifact.
//!
//! # Artifact layout
//!
//! ```text
//! run_dir/
//!   config.toml        byte copy of the run configuration
//!   dataset.jsonl      the questions, in run order
//!   records/<id>.json  one result per question, written atomically
//!   forecasts.jsonl    final forecasts (written when every record exists)
//!   score_report.json  Brier scores over resolved questions
//!   timing.json        gateway call counts and scripted virtual latency
//! ```
//!
//! A run is resumable: re-invoking with the same config and dataset skips
//! questions whose records already exist. Because every record is produced
//! deterministically from the script and written atomically, an interrupted
//! and resumed run finalizes byte-identically to an uninterrupted one.

pub mod agent;
pub mod config;
pub mod supervisor;

pub use agent::{run_agent, AgentDeps, AgentError, AgentOutcome};
pub use config::{
    BlocklistSection, BootstrapSection, ConfigError, EnsembleSection, JudgeSection,
    PipelineSection, ProvidersSection, RunConfig, SearchMode, SupervisorMode,
};
pub use supervisor::{run_supervisor, SupervisorDeps, SupervisorRecord};

use crate::aggregation::{aggregate, AggregationError, AggregationMethod};
use crate::domain::{
    validate_question, DomainError, ForecastRecord, Outcome, Probability, Question,
    ValidatedQuestion,
};
use crate::files::{self, FileError};
use crate::providers::{
    DomainBlocklist, GatewayError, GenerationGateway, GenerationRequest, LimitedGeneration,
    LimitedSearch, RetryPolicy, ScriptError, ScriptedGateways, SearchGateway, Usage,
};
use crate::scoring::{score_forecasts, ScoreReport, ScoringError};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const RESULT_SCHEMA: &str = "delphi/question_result/v1";
pub const TIMING_SCHEMA: &str = "delphi/timing/v1";
pub const SCORE_SCHEMA: &str = "delphi/score_report/v1";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run directory already holds a different config: {path}")]
    ConfigMismatch { path: PathBuf },
    #[error("run directory already holds a different dataset: {path}")]
    DatasetMismatch { path: PathBuf },
    #[error("refusing to resume over corrupt record {path}: {message}")]
    CorruptRecord { path: PathBuf, message: String },
    #[error("missing record {path}; run the benchmark to completion first")]
    MissingRecord { path: PathBuf },
    #[error("duplicate question id {0}")]
    DuplicateQuestion(String),
    #[error("the dataset has no questions")]
    EmptyDataset,
    #[error("no resolved forecast questions to score")]
    NothingToScore,
    #[error(transparent)]
    File(#[from] FileError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Script(#[from] ScriptError),
}

/// Exit-code class for the CLI: 2 = configuration, 3 = gateway, 4 = data.
impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Gateway(_) => 3,
            _ => 4,
        }
    }
}

// ---------------------------------------------------------------------------
// Per-question result
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionStatus {
    Forecast,
    Unforecast,
}

/// Evidence-hygiene and protocol counters, aggregated over the whole panel.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditCounters {
    pub blocked_items: u32,
    pub post_cutoff_dropped: u32,
    pub undated_items: u32,
    pub failed_queries: u32,
    pub protocol_violations: u32,
}

/// The panel's finished product for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalForecast {
    pub question_id: String,
    /// Surviving agents' full records, in agent order.
    pub individual: Vec<ForecastRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed_agents: Vec<u32>,
    /// Plain aggregate of the panel, before supervision.
    pub aggregate_raw: Probability,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supervisor: Option<SupervisorRecord>,
    /// After supervision, before calibration.
    pub merged: Probability,
    /// After calibration: the number that gets scored.
    #[serde(rename = "final")]
    pub final_probability: Probability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub schema: String,
    pub question: Question,
    pub status: QuestionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forecast: Option<FinalForecast>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub audit: AuditCounters,
    pub usage: Usage,
}

fn base_request(providers: &ProvidersSection) -> GenerationRequest {
    let mut request = GenerationRequest::new("", &providers.model);
    request.temperature = providers.temperature;
    request.max_tokens = providers.max_tokens;
    request
}

fn retry_policy(providers: &ProvidersSection) -> RetryPolicy {
    RetryPolicy {
        attempts: providers.retry_attempts,
        base_ms: providers.retry_base_ms,
    }
}

/// Assemble the run's evidence blocklist from its config section.
pub fn build_blocklist(section: &BlocklistSection) -> DomainBlocklist {
    let mut blocklist = DomainBlocklist::empty();
    if section.use_leakage_list {
        blocklist.extend(&DomainBlocklist::leakage_default());
    }
    if section.hide_market_domains {
        blocklist.extend(&DomainBlocklist::market_hiding());
    }
    blocklist.extend(&DomainBlocklist::new(
        section.extra_domains.clone(),
        section.extra_urls.clone(),
    ));
    blocklist
}

/// Run the full panel + supervision + calibration for one question.
///
/// Individual agent failures degrade (the panel continues); a panel with no
/// survivors yields an `Unforecast` record; abort-class gateway errors
/// propagate and stop the run.
pub fn run_question(
    question: &ValidatedQuestion,
    config: &RunConfig,
    generation: &dyn GenerationGateway,
    search: &dyn SearchGateway,
    blocklist: &DomainBlocklist,
) -> Result<QuestionResult, PipelineError> {
    let base = base_request(&config.providers);
    let policy = retry_policy(&config.providers);
    let m = config.pipeline.m_agents;
    let mut outcomes: Vec<Option<AgentOutcome>> = (0..m).map(|_| None).collect();
    let mut failed: Vec<(u32, String)> = Vec::new();
    let mut abort: Option<GatewayError> = None;

    let indices: Vec<u32> = (0..m).collect();
    for chunk in indices.chunks(config.pipeline.max_concurrent_agents.max(1) as usize) {
        let results: Vec<(u32, Result<AgentOutcome, AgentError>)> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let base = &base;
                    s.spawn(move || {
                        let deps = AgentDeps {
                            generation,
                            search,
                            blocklist,
                            base_request: base,
                            policy,
                            search_mode: config.pipeline.search,
                            max_stages: config.pipeline.max_search_stages,
                            nonagentic_queries: config.pipeline.nonagentic_queries,
                            max_results: config.pipeline.max_results,
                            include_market_price: config.pipeline.include_market_price,
                        };
                        (i, run_agent(question, i, &deps))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("agent thread panicked"))
                .collect()
        });
        for (i, result) in results {
            match result {
                Ok(outcome) => outcomes[i as usize] = Some(outcome),
                Err(AgentError::Abort(err)) => abort = abort.or(Some(err)),
                Err(AgentError::Failed { reason, .. }) => failed.push((i, reason)),
            }
        }
        if let Some(err) = abort {
            return Err(err.into());
        }
    }
    failed.sort_by_key(|(i, _)| *i);

    let mut usage = Usage::default();
    let mut audit = AuditCounters::default();
    let mut notes = Vec::new();
    for outcome in outcomes.iter().flatten() {
        usage.absorb(outcome.usage);
        audit.blocked_items += outcome.audit.blocked;
        audit.post_cutoff_dropped += outcome.audit.post_cutoff_dropped;
        audit.undated_items += outcome.audit.undated;
        audit.failed_queries += outcome.audit.failed_queries;
        audit.protocol_violations += outcome.protocol_violations;
        let i = outcome.record.agent_index;
        notes.extend(outcome.notes.iter().map(|n| format!("agent {i}: {n}")));
    }
    for (i, reason) in &failed {
        notes.push(format!("agent {i} failed: {reason}"));
    }

    let survivors: Vec<&AgentOutcome> = outcomes.iter().flatten().collect();
    if survivors.is_empty() {
        return Ok(QuestionResult {
            schema: RESULT_SCHEMA.to_string(),
            question: (**question).clone(),
            status: QuestionStatus::Unforecast,
            forecast: None,
            failure: Some("every agent in the panel failed".to_string()),
            notes,
            audit,
            usage,
        });
    }

    let probabilities: Vec<Probability> =
        survivors.iter().map(|o| o.record.probability).collect();
    let aggregate_raw = match aggregate(&probabilities, config.pipeline.aggregation) {
        Ok(p) => p,
        Err(AggregationError::TooFewForTrim(n)) => {
            notes.push(format!(
                "trimmed mean needs at least 3 forecasts, had {n}; fell back to the mean"
            ));
            aggregate(&probabilities, AggregationMethod::Mean).expect("panel is non-empty")
        }
        Err(err) => unreachable!("aggregate over a non-empty panel cannot fail with {err}"),
    };

    let supervisor_record = if config.pipeline.supervisor == SupervisorMode::None {
        None
    } else if survivors.len() < 2 {
        notes.push("supervision skipped: fewer than 2 surviving forecasts".to_string());
        None
    } else {
        let records: Vec<ForecastRecord> =
            survivors.iter().map(|o| o.record.clone()).collect();
        let deps = SupervisorDeps {
            generation,
            search,
            blocklist,
            base_request: &base,
            policy,
            mode: config.pipeline.supervisor,
            query_cap: config.pipeline.supervisor_query_cap,
            max_results: config.pipeline.max_results,
        };
        let record = run_supervisor(question, &records, aggregate_raw, &deps, &mut usage)?;
        audit.blocked_items += record.audit.blocked;
        audit.post_cutoff_dropped += record.audit.post_cutoff_dropped;
        audit.undated_items += record.audit.undated;
        audit.failed_queries += record.audit.failed_queries;
        if record.violation {
            audit.protocol_violations += 1;
        }
        notes.extend(record.notes.iter().map(|n| format!("supervisor: {n}")));
        Some(record)
    };

    let merged = supervisor_record
        .as_ref()
        .map(|r| r.merged)
        .unwrap_or(aggregate_raw);
    let final_probability = config.calibration.apply(merged);

    Ok(QuestionResult {
        schema: RESULT_SCHEMA.to_string(),
        question: (**question).clone(),
        status: QuestionStatus::Forecast,
        forecast: Some(FinalForecast {
            question_id: question.id.clone(),
            individual: survivors.iter().map(|o| o.record.clone()).collect(),
            failed_agents: failed.iter().map(|(i, _)| *i).collect(),
            aggregate_raw,
            supervisor: supervisor_record,
            merged,
            final_probability,
        }),
        failure: None,
        notes,
        audit,
        usage,
    })
}

// ---------------------------------------------------------------------------
// Run artifact
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub schema: String,
    pub questions: usize,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreArtifact {
    pub schema: String,
    pub report: ScoreReport,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub total: usize,
    pub newly_run: usize,
    pub skipped_existing: usize,
    /// Among the records written by this invocation.
    pub unforecast: usize,
    /// True when every question has a record and the run-level outputs
    /// (forecasts, scores, timing) were (re)written.
    pub finalized: bool,
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::File(FileError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn record_file_name(question_id: &str) -> String {
    let sanitized: String = question_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '@' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{sanitized}.json")
}

pub fn record_path(run_dir: &Path, question_id: &str) -> PathBuf {
    run_dir.join("records").join(record_file_name(question_id))
}

fn record_bytes(record: &QuestionResult) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(record).expect("record serializes");
    bytes.push(b'\n');
    bytes
}

pub fn load_record(path: &Path) -> Result<QuestionResult, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let record: QuestionResult =
        serde_json::from_str(&text).map_err(|e| PipelineError::CorruptRecord {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    if record.schema != RESULT_SCHEMA {
        return Err(PipelineError::CorruptRecord {
            path: path.to_path_buf(),
            message: format!("schema {:?}, expected {RESULT_SCHEMA:?}", record.schema),
        });
    }
    Ok(record)
}

pub fn load_dataset(path: &Path) -> Result<Vec<ValidatedQuestion>, PipelineError> {
    let raw: Vec<Question> = files::read_jsonl(path, files::QUESTIONS_SCHEMA)?;
    raw.into_iter()
        .map(|q| validate_question(q).map_err(PipelineError::from))
        .collect()
}

/// Byte-stable content check: an existing artifact file must match exactly,
/// a missing one is written.
fn ensure_file(path: &Path, expected: &[u8], mismatch: PipelineError) -> Result<(), PipelineError> {
    if path.exists() {
        let existing = fs::read(path).map_err(|e| io_err(path, e))?;
        if existing != expected {
            return Err(mismatch);
        }
        Ok(())
    } else {
        files::write_atomic(path, expected)?;
        Ok(())
    }
}

/// Execute (or resume) a benchmark run against scripted gateways.
///
/// `config_bytes` is the configuration exactly as read from disk; it is
/// stored in the artifact and must match on resume. Completed questions are
/// never re-run. With `question_limit > 0` the run stops early (resumable);
/// once every record exists the run-level outputs are (re)written.
pub fn run_benchmark(
    run_dir: &Path,
    config: &RunConfig,
    config_bytes: &[u8],
    questions: &[ValidatedQuestion],
    scripted: &ScriptedGateways,
) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    if questions.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let mut seen = std::collections::HashSet::new();
    for q in questions {
        if !seen.insert(record_file_name(&q.id)) {
            return Err(PipelineError::DuplicateQuestion(q.id.clone()));
        }
    }

    let records_dir = run_dir.join("records");
    fs::create_dir_all(&records_dir).map_err(|e| io_err(&records_dir, e))?;
    let config_path = run_dir.join("config.toml");
    ensure_file(
        &config_path,
        config_bytes,
        PipelineError::ConfigMismatch {
            path: config_path.clone(),
        },
    )?;
    let dataset_path = run_dir.join("dataset.jsonl");
    let dataset_bytes = files::jsonl_bytes(files::QUESTIONS_SCHEMA, questions);
    ensure_file(
        &dataset_path,
        &dataset_bytes,
        PipelineError::DatasetMismatch {
            path: dataset_path.clone(),
        },
    )?;

    let mut skipped = 0usize;
    let mut pending: Vec<&ValidatedQuestion> = Vec::new();
    for question in questions {
        let path = record_path(run_dir, &question.id);
        if path.exists() {
            load_record(&path)?; // refuse to resume over corrupt records
            skipped += 1;
        } else {
            pending.push(question);
        }
    }
    if config.pipeline.question_limit > 0 {
        pending.truncate(config.pipeline.question_limit as usize);
    }

    let generation = LimitedGeneration::new(
        scripted,
        config.providers.max_in_flight as usize,
        (config.providers.generation_budget > 0).then_some(config.providers.generation_budget),
    );
    let search = LimitedSearch::new(
        scripted,
        config.providers.max_in_flight as usize,
        (config.providers.search_budget > 0).then_some(config.providers.search_budget),
    );
    let blocklist = build_blocklist(&config.blocklists);

    let mut newly_run = 0usize;
    let mut unforecast = 0usize;
    for chunk in pending.chunks(config.pipeline.max_concurrent_questions.max(1) as usize) {
        let results: Vec<Result<QuestionResult, PipelineError>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&question| {
                    let generation = &generation;
                    let search = &search;
                    let blocklist = &blocklist;
                    s.spawn(move || run_question(question, config, generation, search, blocklist))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("question thread panicked"))
                .collect()
        });
        let mut first_error = None;
        for (question, result) in chunk.iter().zip(results) {
            match result {
                Ok(record) => {
                    if record.status == QuestionStatus::Unforecast {
                        unforecast += 1;
                    }
                    files::write_atomic(
                        &record_path(run_dir, &question.id),
                        &record_bytes(&record),
                    )?;
                    newly_run += 1;
                }
                Err(err) => first_error = first_error.or(Some(err)),
            }
        }
        if let Some(err) = first_error {
            return Err(err);
        }
    }

    let finalized = skipped + newly_run == questions.len();
    if finalized {
        finalize(run_dir, questions)?;
    }
    Ok(RunSummary {
        run_dir: run_dir.to_path_buf(),
        total: questions.len(),
        newly_run,
        skipped_existing: skipped,
        unforecast,
        finalized,
    })
}

/// Collect `(question_id, final forecast, outcome)` for every resolved,
/// forecast question — the single scoring path used by both `finalize` and
/// offline re-scoring.
fn resolved_scores(
    questions: &[ValidatedQuestion],
    records: &[QuestionResult],
) -> Vec<(String, Probability, Outcome)> {
    questions
        .iter()
        .zip(records)
        .filter_map(|(question, record)| {
            let outcome = question.resolved_outcome()?;
            let forecast = record.forecast.as_ref()?;
            Some((question.id.clone(), forecast.final_probability, outcome))
        })
        .collect()
}

fn load_all_records(
    run_dir: &Path,
    questions: &[ValidatedQuestion],
) -> Result<Vec<QuestionResult>, PipelineError> {
    questions
        .iter()
        .map(|question| {
            let path = record_path(run_dir, &question.id);
            if !path.exists() {
                return Err(PipelineError::MissingRecord { path });
            }
            load_record(&path)
        })
        .collect()
}

/// Write the run-level outputs from the per-question records.
fn finalize(run_dir: &Path, questions: &[ValidatedQuestion]) -> Result<(), PipelineError> {
    let records = load_all_records(run_dir, questions)?;

    let forecasts: Vec<&FinalForecast> =
        records.iter().filter_map(|r| r.forecast.as_ref()).collect();
    files::write_jsonl(
        &run_dir.join("forecasts.jsonl"),
        files::FORECASTS_SCHEMA,
        &forecasts,
    )?;

    let scores = resolved_scores(questions, &records);
    if !scores.is_empty() {
        let report = score_forecasts(&scores)?;
        let artifact = ScoreArtifact {
            schema: SCORE_SCHEMA.to_string(),
            report,
        };
        let mut bytes = serde_json::to_vec_pretty(&artifact).expect("report serializes");
        bytes.push(b'\n');
        files::write_atomic(&run_dir.join("score_report.json"), &bytes)?;
    }

    let mut usage = Usage::default();
    for record in &records {
        usage.absorb(record.usage);
    }
    let timing = TimingReport {
        schema: TIMING_SCHEMA.to_string(),
        questions: records.len(),
        usage,
    };
    let mut bytes = serde_json::to_vec_pretty(&timing).expect("timing serializes");
    bytes.push(b'\n');
    files::write_atomic(&run_dir.join("timing.json"), &bytes)?;
    Ok(())
}

/// Load a finished (or partial) run: config, dataset, and one record per
/// question. Errors if any record is missing.
pub fn load_run(
    run_dir: &Path,
) -> Result<(RunConfig, Vec<ValidatedQuestion>, Vec<QuestionResult>), PipelineError> {
    let (config, _) = RunConfig::load(&run_dir.join("config.toml"))?;
    let questions = load_dataset(&run_dir.join("dataset.jsonl"))?;
    let records = load_all_records(run_dir, &questions)?;
    Ok((config, questions, records))
}

/// Re-score a persisted run from its records alone (no gateways involved).
pub fn score_artifact(run_dir: &Path) -> Result<ScoreReport, PipelineError> {
    let questions = load_dataset(&run_dir.join("dataset.jsonl"))?;
    let records = load_all_records(run_dir, &questions)?;
    let scores = resolved_scores(&questions, &records);
    if scores.is_empty() {
        return Err(PipelineError::NothingToScore);
    }
    Ok(score_forecasts(&scores)?)
}
