//! Run reports: gather a finished run's artifacts (plus optional audit
//! sidecars) into one deterministic text or CSV summary. Every row names the
//! artifact file it was computed from.

use crate::domain::Outcome;
use crate::files::{self, FileError};
use crate::integrity::{
    baseline_score, filtered_score, worst_case_score, FilteredScore, FlagRecord, IntegrityError,
    QuestionTraces, TraceForecast, WorstCaseScore,
};
use crate::pipeline::{
    load_dataset, load_record, record_path, AuditCounters, PipelineError, QuestionResult,
    QuestionStatus, RunConfig, TimingReport,
};
use crate::scoring::ScoreReport;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    File(#[from] FileError),
    #[error(transparent)]
    Integrity(#[from] IntegrityError),
    #[error("cannot read {path}: {message}")]
    BadArtifact { path: PathBuf, message: String },
}

/// Robustness views of a run under a set of foreknowledge flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagSummary {
    /// The flags file the summary was computed from.
    pub source: PathBuf,
    /// Total judge verdicts in the file.
    pub n_judged: usize,
    /// Verdicts that flagged foreknowledge.
    pub n_flagged: usize,
    pub baseline: ScoreReport,
    pub filtered: FilteredScore,
    pub worst_case: WorstCaseScore,
}

/// Everything the `report` command prints, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub run_dir: PathBuf,
    pub config: RunConfig,
    pub n_questions: usize,
    pub n_forecast: usize,
    pub n_unforecast: usize,
    pub n_resolved: usize,
    pub score: Option<ScoreReport>,
    pub timing: Option<TimingReport>,
    pub audit_totals: AuditCounters,
    pub flags: Option<FlagSummary>,
    /// `(question_id, brier)` rows in dataset order, resolved questions only.
    pub per_question: Vec<(String, f64)>,
}

/// Per-trace probabilities for resolved forecast questions — the audit view
/// the integrity re-scores work over.
pub fn audit_views(
    questions: &[(String, Option<Outcome>)],
    records: &[QuestionResult],
) -> Vec<QuestionTraces> {
    questions
        .iter()
        .zip(records)
        .filter_map(|((id, outcome), record)| {
            let outcome = (*outcome)?;
            let forecast = record.forecast.as_ref()?;
            Some(QuestionTraces {
                question_id: id.clone(),
                outcome,
                traces: forecast
                    .individual
                    .iter()
                    .map(|r| TraceForecast {
                        trace_id: r.trace_id(),
                        probability: r.probability,
                    })
                    .collect(),
            })
        })
        .collect()
}

/// Assemble a report from a run directory. `flags` optionally points at a
/// judged flags file (`delphi/flags/v1`); `threshold` is the worst-case
/// imputation threshold used with it.
pub fn build_report(
    run_dir: &Path,
    flags: Option<&Path>,
    threshold: u32,
) -> Result<ReportBundle, ReportError> {
    let (config, _) = RunConfig::load(&run_dir.join("config.toml")).map_err(PipelineError::from)?;
    let questions = load_dataset(&run_dir.join("dataset.jsonl"))?;
    let mut records = Vec::with_capacity(questions.len());
    for q in &questions {
        records.push(load_record(&record_path(run_dir, &q.id))?);
    }

    let n_forecast = records
        .iter()
        .filter(|r| r.status == QuestionStatus::Forecast)
        .count();
    let n_resolved = questions
        .iter()
        .zip(&records)
        .filter(|(q, r)| q.resolved_outcome().is_some() && r.status == QuestionStatus::Forecast)
        .count();

    let mut audit_totals = AuditCounters::default();
    for r in &records {
        audit_totals.blocked_items += r.audit.blocked_items;
        audit_totals.post_cutoff_dropped += r.audit.post_cutoff_dropped;
        audit_totals.undated_items += r.audit.undated_items;
        audit_totals.failed_queries += r.audit.failed_queries;
        audit_totals.protocol_violations += r.audit.protocol_violations;
    }

    let score_path = run_dir.join("score_report.json");
    let score = if score_path.exists() {
        let text = std::fs::read_to_string(&score_path).map_err(|e| ReportError::BadArtifact {
            path: score_path.clone(),
            message: e.to_string(),
        })?;
        let artifact: crate::pipeline::ScoreArtifact =
            serde_json::from_str(&text).map_err(|e| ReportError::BadArtifact {
                path: score_path.clone(),
                message: e.to_string(),
            })?;
        Some(artifact.report)
    } else {
        None
    };

    let timing_path = run_dir.join("timing.json");
    let timing = if timing_path.exists() {
        let text = std::fs::read_to_string(&timing_path).map_err(|e| ReportError::BadArtifact {
            path: timing_path.clone(),
            message: e.to_string(),
        })?;
        Some(
            serde_json::from_str::<TimingReport>(&text).map_err(|e| ReportError::BadArtifact {
                path: timing_path.clone(),
                message: e.to_string(),
            })?,
        )
    } else {
        None
    };

    let per_question = score
        .as_ref()
        .map(|report| {
            report
                .per_question
                .iter()
                .map(|q| (q.question_id.clone(), q.brier))
                .collect()
        })
        .unwrap_or_default();

    let flags = match flags {
        None => None,
        Some(flags_path) => {
            let flag_records: Vec<FlagRecord> =
                files::read_jsonl(flags_path, files::FLAGS_SCHEMA)?;
            let views = audit_views(
                &questions
                    .iter()
                    .map(|q| (q.id.clone(), q.resolved_outcome()))
                    .collect::<Vec<_>>(),
                &records,
            );
            Some(FlagSummary {
                source: flags_path.to_path_buf(),
                n_judged: flag_records.len(),
                n_flagged: flag_records.iter().filter(|f| f.has_foreknowledge).count(),
                baseline: baseline_score(&views)?,
                filtered: filtered_score(&views, &flag_records)?,
                worst_case: worst_case_score(&views, &flag_records, threshold)?,
            })
        }
    };

    Ok(ReportBundle {
        run_dir: run_dir.to_path_buf(),
        config,
        n_questions: questions.len(),
        n_forecast,
        n_unforecast: questions.len() - n_forecast,
        n_resolved,
        score,
        timing,
        audit_totals,
        flags,
        per_question,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
}

struct Row {
    metric: String,
    value: String,
    source: String,
}

fn rows(bundle: &ReportBundle) -> Vec<Row> {
    let mut rows = Vec::new();
    let mut push = |metric: &str, value: String, source: &str| {
        rows.push(Row {
            metric: metric.to_string(),
            value,
            source: source.to_string(),
        })
    };
    push("questions", bundle.n_questions.to_string(), "dataset.jsonl");
    push("forecast", bundle.n_forecast.to_string(), "records/");
    push("unforecast", bundle.n_unforecast.to_string(), "records/");
    push("resolved_forecast", bundle.n_resolved.to_string(), "records/");
    if let Some(score) = &bundle.score {
        push(
            "mean_brier",
            format!("{:.6}", score.mean_brier),
            "score_report.json",
        );
        push(
            "scored_questions",
            score.n_questions.to_string(),
            "score_report.json",
        );
    }
    push(
        "blocked_items",
        bundle.audit_totals.blocked_items.to_string(),
        "records/",
    );
    push(
        "post_cutoff_dropped",
        bundle.audit_totals.post_cutoff_dropped.to_string(),
        "records/",
    );
    push(
        "undated_items",
        bundle.audit_totals.undated_items.to_string(),
        "records/",
    );
    push(
        "failed_queries",
        bundle.audit_totals.failed_queries.to_string(),
        "records/",
    );
    push(
        "protocol_violations",
        bundle.audit_totals.protocol_violations.to_string(),
        "records/",
    );
    if let Some(timing) = &bundle.timing {
        push(
            "generation_calls",
            timing.usage.generation_calls.to_string(),
            "timing.json",
        );
        push(
            "search_calls",
            timing.usage.search_calls.to_string(),
            "timing.json",
        );
        push(
            "virtual_latency_ms",
            timing.usage.virtual_latency_ms.to_string(),
            "timing.json",
        );
    }
    if let Some(flags) = &bundle.flags {
        let source = flags.source.display().to_string();
        push("judged_traces", flags.n_judged.to_string(), &source);
        push("flagged_traces", flags.n_flagged.to_string(), &source);
        push(
            "baseline_brier",
            format!("{:.6}", flags.baseline.mean_brier),
            &source,
        );
        push(
            "filtered_brier",
            format!("{:.6}", flags.filtered.report.mean_brier),
            &source,
        );
        push(
            "filtered_dropped_traces",
            flags.filtered.dropped_traces.to_string(),
            &source,
        );
        push(
            "filtered_excluded_questions",
            flags.filtered.excluded_questions.to_string(),
            &source,
        );
        push(
            "worst_case_brier",
            format!("{:.6}", flags.worst_case.report.mean_brier),
            &source,
        );
        push(
            "worst_case_imputed",
            flags.worst_case.imputed_questions.to_string(),
            &source,
        );
        push(
            "worst_case_threshold",
            flags.worst_case.threshold.to_string(),
            &source,
        );
    }
    for (question_id, brier) in &bundle.per_question {
        push(
            &format!("brier[{question_id}]"),
            format!("{brier:.6}"),
            "score_report.json",
        );
    }
    rows
}

/// Render the report. Output bytes are a pure function of the bundle.
pub fn emit_report(bundle: &ReportBundle, format: ReportFormat) -> Vec<u8> {
    let rows = rows(bundle);
    match format {
        ReportFormat::Csv => {
            let mut out = String::from("metric,value,source\n");
            for row in rows {
                writeln!(out, "{},{},{}", row.metric, row.value, row.source)
                    .expect("writing to string");
            }
            out.into_bytes()
        }
        ReportFormat::Text => {
            let width = rows.iter().map(|r| r.metric.len()).max().unwrap_or(0);
            let mut out = format!("run report: {}\n", bundle.run_dir.display());
            for row in rows {
                writeln!(
                    out,
                    "  {:width$}  {:>14}  ({})",
                    row.metric,
                    row.value,
                    row.source,
                    width = width
                )
                .expect("writing to string");
            }
            out.into_bytes()
        }
    }
}
