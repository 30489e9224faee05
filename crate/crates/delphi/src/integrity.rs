//! Foreknowledge auditing: a judge that reviews forecast traces for evidence
//! of outcome knowledge, robustness re-scores of a run under its flags, and
//! prevalence estimation from manual validation counts.

use crate::aggregation::{aggregate, AggregationMethod, Confidence};
use crate::assets;
use crate::domain::{ForecastRecord, Outcome, Probability, ValidatedQuestion};
use crate::providers::{
    evidence_from_response, generate_with_retries, search_with_retries, GatewayError,
    GenerationGateway, GenerationRequest, RetryPolicy, SearchGateway, SearchRequest, Usage,
};
use crate::scoring::{brier, QuestionScore, ScoreReport};
use crate::stats::mean;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IntegrityError {
    #[error("question {0} is unresolved; judging is retrospective")]
    Unresolved(String),
    #[error("flag references unknown trace {trace_id}")]
    DanglingFlag { trace_id: String },
    #[error("question {0} has no traces")]
    EmptyQuestion(String),
    #[error("worst-case threshold must be at least 1")]
    BadThreshold,
    #[error("no questions to score")]
    Empty,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// The judge's verdict on one forecast trace. Field set mirrors the JSON
/// schema the judge prompt demands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagRecord {
    pub question_id: String,
    pub trace_id: String,
    pub has_foreknowledge: bool,
    pub confidence_level: Confidence,
    pub evidence_quotes: Vec<String>,
    pub evidence_explanation: String,
    pub legitimate_reasoning: bool,
    pub key_indicators: Vec<String>,
    pub overall_assessment: String,
}

#[derive(Debug, Deserialize)]
struct JudgeVerdict {
    has_foreknowledge: bool,
    confidence_level: Confidence,
    #[serde(default)]
    evidence_quotes: Vec<String>,
    #[serde(default)]
    evidence_explanation: String,
    #[serde(default = "default_true")]
    legitimate_reasoning: bool,
    #[serde(default)]
    key_indicators: Vec<String>,
    #[serde(default)]
    overall_assessment: String,
}

fn default_true() -> bool {
    true
}

/// Render the evidence and reasoning of a record the way the judge sees it.
fn render_model_output(record: &ForecastRecord) -> String {
    let mut out = String::new();
    for (i, step) in record.trace.steps.iter().enumerate() {
        out.push_str(&format!("[reasoning step {}]\n{}\n\n", i + 1, step));
    }
    if !record.trace.cited_passages.is_empty() {
        out.push_str("CITED PASSAGES:\n");
        for c in &record.trace.cited_passages {
            out.push_str(&format!("- {} :: {}\n", c.source_url, c.text));
        }
        out.push('\n');
    }
    if !record.evidence.is_empty() {
        out.push_str("SEARCH RESULTS:\n");
        for e in &record.evidence {
            let date = e
                .published_date
                .map(|d| d.to_string())
                .unwrap_or_else(|| "undated".to_string());
            out.push_str(&format!(
                "- [stage {} | {}] query {:?}: {} ({})\n",
                e.stage_index, date, e.query, e.snippet, e.source_url
            ));
        }
    }
    out
}

/// Find the first balanced `{…}` JSON object in free-form text.
fn extract_first_json(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let bytes = text.as_bytes();
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if *b == b'\\' {
                escaped = true;
            } else if *b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

fn parse_verdict(text: &str) -> Option<JudgeVerdict> {
    serde_json::from_str(extract_first_json(text)?).ok()
}

fn conservative_flag(question_id: &str, trace_id: &str, reason: &str) -> FlagRecord {
    FlagRecord {
        question_id: question_id.to_string(),
        trace_id: trace_id.to_string(),
        has_foreknowledge: true,
        confidence_level: Confidence::Low,
        evidence_quotes: Vec::new(),
        evidence_explanation: format!("conservatively flagged: {reason}"),
        legitimate_reasoning: false,
        key_indicators: vec!["judge_failure".to_string()],
        overall_assessment: "judge did not return a usable verdict; flagged to keep audits \
                             high-recall"
            .to_string(),
    }
}

const JUDGE_SEARCH_CAP: u32 = 2;

/// Ask the judge whether one forecast trace shows knowledge of the outcome.
///
/// The judge may issue up to two `SEARCH: <query>` rounds before answering.
/// An unparseable verdict gets one reprompt; any remaining failure produces a
/// conservative flag (audits over-flag, never under-flag). Script misses and
/// budget exhaustion abort instead.
pub fn judge_trace(
    question: &ValidatedQuestion,
    record: &ForecastRecord,
    model_name: &str,
    generation: &dyn GenerationGateway,
    search: Option<&dyn SearchGateway>,
    base_request: &GenerationRequest,
    policy: RetryPolicy,
    usage: &mut Usage,
) -> Result<FlagRecord, IntegrityError> {
    let outcome = question
        .resolved_outcome()
        .ok_or_else(|| IntegrityError::Unresolved(question.id.clone()))?;
    let trace_id = record.trace_id();
    let scope = format!("judge:{trace_id}");
    let mut prompt = assets::render_template(
        assets::FOREKNOWLEDGE_JUDGE_PROMPT,
        &[
            ("question", &question.text),
            ("news_end_date", &question.knowledge_cutoff.to_string()),
            ("resolution_date", &question.resolution_date.to_string()),
            ("resolution", &format!("{:.1}", outcome.as_f64())),
            ("model_name", model_name),
            (
                "probability:.4f",
                &format!("{:.4}", record.probability.value()),
            ),
            ("model_output", &render_model_output(record)),
        ],
    );
    let mut searches = 0u32;
    let mut reprompted = false;
    loop {
        let resp = match generate_with_retries(
            generation,
            &scope,
            &base_request.with_prompt(prompt.clone()),
            policy,
            usage,
        ) {
            Ok(resp) => resp,
            Err(err) if err.aborts_run() => return Err(err.into()),
            Err(err) => {
                return Ok(conservative_flag(
                    &question.id,
                    &trace_id,
                    &format!("gateway failure: {err}"),
                ))
            }
        };
        if let Some(v) = parse_verdict(&resp.text) {
            return Ok(FlagRecord {
                question_id: question.id.clone(),
                trace_id: trace_id.clone(),
                has_foreknowledge: v.has_foreknowledge,
                confidence_level: v.confidence_level,
                evidence_quotes: v.evidence_quotes,
                evidence_explanation: v.evidence_explanation,
                legitimate_reasoning: v.legitimate_reasoning,
                key_indicators: v.key_indicators,
                overall_assessment: v.overall_assessment,
            });
        }
        if let Some(query) = first_search_query(&resp.text) {
            if searches < JUDGE_SEARCH_CAP {
                if let Some(search_gw) = search {
                    searches += 1;
                    let req = SearchRequest {
                        query: query.clone(),
                        // The judge investigates the present: no cutoff applies,
                        // so pass the resolution date as the nominal bound.
                        date_cutoff: question.resolution_date,
                        max_results: 5,
                    };
                    match search_with_retries(search_gw, &scope, &req, policy, usage) {
                        Ok(found) => {
                            prompt.push_str("\n\nSEARCH RESULTS FOR ");
                            prompt.push_str(&format!("{query:?}:\n"));
                            for item in
                                evidence_from_response(&query, &found, searches, question.resolution_date)
                            {
                                prompt.push_str(&format!(
                                    "- {} ({})\n",
                                    item.snippet, item.source_url
                                ));
                            }
                            prompt.push_str("\nNow return your analysis in the required JSON format.");
                            continue;
                        }
                        Err(err) if err.aborts_run() => return Err(err.into()),
                        Err(_) => {
                            prompt.push_str(
                                "\n\nThe search tool failed; answer from the material above \
                                 in the required JSON format.",
                            );
                            continue;
                        }
                    }
                }
            }
        }
        if !reprompted {
            reprompted = true;
            prompt.push_str(
                "\n\nYour previous reply was not valid JSON in the required format. Return \
                 ONLY the JSON object now.",
            );
            continue;
        }
        return Ok(conservative_flag(
            &question.id,
            &trace_id,
            "unparseable verdict after one reprompt",
        ));
    }
}

fn first_search_query(text: &str) -> Option<String> {
    text.lines().find_map(|line| {
        line.trim()
            .strip_prefix("SEARCH:")
            .map(|q| q.trim().to_string())
            .filter(|q| !q.is_empty())
    })
}

// ---------------------------------------------------------------------------
// Robustness re-scoring under flags
// ---------------------------------------------------------------------------

/// One question's traces in the audit view: per-trace probabilities joined to
/// flags by trace id, scored by the mean of surviving traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionTraces {
    pub question_id: String,
    pub outcome: Outcome,
    pub traces: Vec<TraceForecast>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceForecast {
    pub trace_id: String,
    pub probability: Probability,
}

fn question_mean(q: &QuestionTraces, probs: &[Probability]) -> Result<f64, IntegrityError> {
    let agg = aggregate(probs, AggregationMethod::Mean)
        .map_err(|_| IntegrityError::EmptyQuestion(q.question_id.clone()))?;
    Ok(brier(agg, q.outcome))
}

fn report_from(per_question: Vec<QuestionScore>) -> Result<ScoreReport, IntegrityError> {
    if per_question.is_empty() {
        return Err(IntegrityError::Empty);
    }
    let briers: Vec<f64> = per_question.iter().map(|q| q.brier).collect();
    Ok(ScoreReport {
        n_questions: per_question.len(),
        mean_brier: mean(&briers),
        per_question,
    })
}

/// Score every question by the mean of all its traces (no filtering).
pub fn baseline_score(questions: &[QuestionTraces]) -> Result<ScoreReport, IntegrityError> {
    let mut per_question = Vec::with_capacity(questions.len());
    for q in questions {
        let probs: Vec<Probability> = q.traces.iter().map(|t| t.probability).collect();
        per_question.push(QuestionScore {
            question_id: q.question_id.clone(),
            brier: question_mean(q, &probs)?,
        });
    }
    report_from(per_question)
}

/// Check that every positive flag points at a trace we actually have.
fn flagged_ids<'f>(
    questions: &[QuestionTraces],
    flags: &'f [FlagRecord],
) -> Result<Vec<&'f str>, IntegrityError> {
    let mut ids = Vec::new();
    for flag in flags.iter().filter(|f| f.has_foreknowledge) {
        let known = questions
            .iter()
            .any(|q| q.traces.iter().any(|t| t.trace_id == flag.trace_id));
        if !known {
            return Err(IntegrityError::DanglingFlag {
                trace_id: flag.trace_id.clone(),
            });
        }
        ids.push(flag.trace_id.as_str());
    }
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredScore {
    pub report: ScoreReport,
    /// Flagged traces removed before re-aggregation.
    pub dropped_traces: u32,
    /// Questions that lost every trace and were excluded from the mean.
    pub excluded_questions: u32,
}

/// Remove every flagged trace, re-aggregate the survivors per question, and
/// re-score. Questions with no surviving trace are excluded and counted.
pub fn filtered_score(
    questions: &[QuestionTraces],
    flags: &[FlagRecord],
) -> Result<FilteredScore, IntegrityError> {
    let flagged = flagged_ids(questions, flags)?;
    let mut per_question = Vec::new();
    let mut dropped = 0u32;
    let mut excluded = 0u32;
    for q in questions {
        let survivors: Vec<Probability> = q
            .traces
            .iter()
            .filter(|t| !flagged.contains(&t.trace_id.as_str()))
            .map(|t| t.probability)
            .collect();
        dropped += (q.traces.len() - survivors.len()) as u32;
        if survivors.is_empty() {
            excluded += 1;
            continue;
        }
        per_question.push(QuestionScore {
            question_id: q.question_id.clone(),
            brier: question_mean(q, &survivors)?,
        });
    }
    Ok(FilteredScore {
        report: report_from(per_question)?,
        dropped_traces: dropped,
        excluded_questions: excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCaseScore {
    pub report: ScoreReport,
    /// Questions that hit the flag threshold and were imputed at p = 0.5.
    pub imputed_questions: u32,
    pub threshold: u32,
}

/// Assume the worst about heavily flagged questions: any question with at
/// least `threshold` flagged traces is scored as if forecast at 0.5 (Brier
/// 0.25 against either outcome); the rest keep their baseline score.
pub fn worst_case_score(
    questions: &[QuestionTraces],
    flags: &[FlagRecord],
    threshold: u32,
) -> Result<WorstCaseScore, IntegrityError> {
    if threshold == 0 {
        return Err(IntegrityError::BadThreshold);
    }
    let flagged = flagged_ids(questions, flags)?;
    let mut per_question = Vec::with_capacity(questions.len());
    let mut imputed = 0u32;
    for q in questions {
        let flag_count = q
            .traces
            .iter()
            .filter(|t| flagged.contains(&t.trace_id.as_str()))
            .count() as u32;
        let brier_value = if flag_count >= threshold {
            imputed += 1;
            0.25
        } else {
            let probs: Vec<Probability> = q.traces.iter().map(|t| t.probability).collect();
            question_mean(q, &probs)?
        };
        per_question.push(QuestionScore {
            question_id: q.question_id.clone(),
            brier: brier_value,
        });
    }
    Ok(WorstCaseScore {
        report: report_from(per_question)?,
        imputed_questions: imputed,
        threshold,
    })
}

/// Default per-question flag threshold for the worst-case bound.
pub const WORST_CASE_THRESHOLD: u32 = 5;

// ---------------------------------------------------------------------------
// Prevalence accounting
// ---------------------------------------------------------------------------

/// Estimated true contamination rate backed out of raw judge flags and the
/// judge's validated precision/recall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceEstimate {
    pub n_total: u64,
    pub flags: u64,
    pub est_tp: f64,
    pub est_fp: f64,
    pub est_fn: f64,
    pub est_tn: f64,
    /// (est_tp + est_fn) / n_total.
    pub est_prevalence: f64,
}

/// Integer-rounded view for report tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundedPrevalence {
    pub tp: i64,
    pub fp: i64,
    pub fn_: i64,
    pub tn: i64,
    /// Percent, two decimals.
    pub prevalence_pct: f64,
}

impl PrevalenceEstimate {
    pub fn rounded(&self) -> RoundedPrevalence {
        RoundedPrevalence {
            tp: self.est_tp.round() as i64,
            fp: self.est_fp.round() as i64,
            fn_: self.est_fn.round() as i64,
            tn: self.est_tn.round() as i64,
            prevalence_pct: (self.est_prevalence * 10_000.0).round() / 100.0,
        }
    }
}

/// Back out the contamination rate: of `flags` positives, `precision·flags`
/// are true; recall then implies the misses; the remainder of the clean pool
/// is truly negative.
pub fn estimate_prevalence(
    n_total: u64,
    flags: u64,
    precision: f64,
    recall: f64,
) -> Result<PrevalenceEstimate, IntegrityError> {
    if !(precision > 0.0 && precision <= 1.0 && precision.is_finite()) {
        return Err(IntegrityError::Empty);
    }
    if !(recall > 0.0 && recall <= 1.0 && recall.is_finite()) {
        return Err(IntegrityError::BadThreshold);
    }
    if flags > n_total || n_total == 0 {
        return Err(IntegrityError::Empty);
    }
    let est_tp = precision * flags as f64;
    let est_fp = flags as f64 - est_tp;
    let est_fn = est_tp * (1.0 - recall) / recall;
    let est_tn = (n_total - flags) as f64 - est_fn;
    Ok(PrevalenceEstimate {
        n_total,
        flags,
        est_tp,
        est_fp,
        est_fn,
        est_tn,
        est_prevalence: (est_tp + est_fn) / n_total as f64,
    })
}

/// Confusion counts from manual audit labels `(flagged, truly_leaky)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationTally {
    pub tp: u32,
    pub fp: u32,
    pub tn: u32,
    pub fn_: u32,
    /// `None` when undefined (zero flagged).
    pub precision: Option<f64>,
    /// `None` when undefined (zero truly leaky).
    pub recall: Option<f64>,
    pub false_negative_rate: Option<f64>,
}

pub fn judge_validation_tally(labels: &[(bool, bool)]) -> ValidationTally {
    let mut tp = 0u32;
    let mut fp = 0u32;
    let mut tn = 0u32;
    let mut fn_ = 0u32;
    for (flagged, leaky) in labels {
        match (flagged, leaky) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |num: u32, den: u32| (den > 0).then(|| f64::from(num) / f64::from(den));
    ValidationTally {
        tp,
        fp,
        tn,
        fn_,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        false_negative_rate: ratio(fn_, tp + fn_),
    }
}
