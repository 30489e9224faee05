//! Core data model: probabilities, outcomes, questions, evidence, and traces.
//!
//! Probabilities serialize at a declared precision of six decimal places; all
//! in-memory arithmetic stays at full `f64` precision. Dates are UTC calendar
//! dates throughout (ISO-8601 on the wire).

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::Deref;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("probability is not finite")]
    NonFinite,
    #[error("probability {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("clamp epsilon {0} must lie in (0, 0.5)")]
    BadEpsilon(f64),
    #[error("question {0}: text is empty")]
    EmptyText(String),
    #[error("question {id}: knowledge cutoff {cutoff} falls after resolution date {resolution}")]
    CutoffAfterResolution {
        id: String,
        cutoff: NaiveDate,
        resolution: NaiveDate,
    },
    #[error("question {id}: outcome {value} is not binary (expected 0 or 1)")]
    NonBinaryOutcome { id: String, value: f64 },
    #[error("evidence stage index must be >= 1")]
    BadStageIndex,
}

/// A probability in `[0, 1]`.
///
/// Declared serialization precision is six decimal places: values are rounded
/// to 6 dp when written and survive a round trip bit-exactly at that precision.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Probability(f64);

impl Probability {
    pub fn new(value: f64) -> Result<Self, DomainError> {
        if !value.is_finite() {
            return Err(DomainError::NonFinite);
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(DomainError::OutOfRange(value));
        }
        Ok(Probability(value))
    }

    pub const HALF: Probability = Probability(0.5);

    pub fn value(self) -> f64 {
        self.0
    }

    /// The value rounded to the declared six-decimal serialization precision.
    pub fn rounded(self) -> f64 {
        (self.0 * 1e6).round() / 1e6
    }
}

impl fmt::Display for Probability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}", self.0)
    }
}

impl Serialize for Probability {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.rounded())
    }
}

impl<'de> Deserialize<'de> for Probability {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(deserializer)?;
        Probability::new(v).map_err(serde::de::Error::custom)
    }
}

/// Clamp a raw probability into `[epsilon, 1 - epsilon]` ahead of logit-scale
/// math. Never applied when scoring.
pub fn clamp_probability(p: f64, epsilon: f64) -> Result<Probability, DomainError> {
    if !p.is_finite() {
        return Err(DomainError::NonFinite);
    }
    if !epsilon.is_finite() || epsilon <= 0.0 || epsilon >= 0.5 {
        return Err(DomainError::BadEpsilon(epsilon));
    }
    Probability::new(p.clamp(epsilon, 1.0 - epsilon))
}

/// Default clamp width used before logit transforms.
pub const DEFAULT_CLAMP_EPSILON: f64 = 1e-4;

/// A resolved binary outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    No,
    Yes,
}

impl Outcome {
    pub fn as_f64(self) -> f64 {
        match self {
            Outcome::No => 0.0,
            Outcome::Yes => 1.0,
        }
    }

    pub fn from_f64(value: f64) -> Option<Outcome> {
        if value == 0.0 {
            Some(Outcome::No)
        } else if value == 1.0 {
            Some(Outcome::Yes)
        } else {
            None
        }
    }
}

/// Where a question came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuestionSource {
    Retrospective,
    Live,
    #[default]
    Manual,
}

/// A binary forecasting question.
///
/// `outcome` is present iff the question has resolved; it is kept as a raw
/// number on the wire so that validation (not deserialization) rejects
/// non-binary values with a useful error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub knowledge_cutoff: NaiveDate,
    pub resolution_date: NaiveDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub market_price: Option<Probability>,
    #[serde(default)]
    pub source: QuestionSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl Question {
    pub fn resolved_outcome(&self) -> Option<Outcome> {
        self.outcome.and_then(Outcome::from_f64)
    }
}

/// A question that passed [`validate_question`]. Validation is idempotent:
/// re-validating the inner question always succeeds and changes nothing.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ValidatedQuestion(Question);

impl ValidatedQuestion {
    pub fn into_inner(self) -> Question {
        self.0
    }
}

impl Deref for ValidatedQuestion {
    type Target = Question;

    fn deref(&self) -> &Question {
        &self.0
    }
}

/// Validate invariants on a question: non-empty text, cutoff not after the
/// resolution date, binary outcome when present.
pub fn validate_question(question: Question) -> Result<ValidatedQuestion, DomainError> {
    if question.text.trim().is_empty() {
        return Err(DomainError::EmptyText(question.id));
    }
    if question.knowledge_cutoff > question.resolution_date {
        return Err(DomainError::CutoffAfterResolution {
            id: question.id,
            cutoff: question.knowledge_cutoff,
            resolution: question.resolution_date,
        });
    }
    if let Some(value) = question.outcome {
        if Outcome::from_f64(value).is_none() {
            return Err(DomainError::NonBinaryOutcome {
                id: question.id,
                value,
            });
        }
    }
    Ok(ValidatedQuestion(question))
}

/// One retrieved snippet of evidence.
///
/// `requested_cutoff` echoes the date cutoff the search was issued under so
/// that integrity audits can check retrieval discipline without re-running the
/// gateway. `published_date` of `None` means the source was undated; such
/// items are kept but counted in the evidence audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub query: String,
    pub snippet: String,
    pub source_url: String,
    pub published_date: Option<NaiveDate>,
    pub retrieved_at: NaiveDateTime,
    pub stage_index: u32,
    pub requested_cutoff: NaiveDate,
}

impl EvidenceItem {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.stage_index < 1 {
            return Err(DomainError::BadStageIndex);
        }
        Ok(())
    }
}

/// A passage an agent explicitly cited in support of its forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitedPassage {
    pub text: String,
    pub source_url: String,
}

/// The reasoning an agent produced on the way to its probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ReasoningTrace {
    pub steps: Vec<String>,
    pub cited_passages: Vec<CitedPassage>,
}

/// One agent's forecast for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub question_id: String,
    pub agent_index: u32,
    pub probability: Probability,
    pub trace: ReasoningTrace,
    pub evidence: Vec<EvidenceItem>,
}

impl ForecastRecord {
    /// Stable identifier joining this record to integrity flags.
    pub fn trace_id(&self) -> String {
        trace_id(&self.question_id, self.agent_index)
    }
}

pub fn trace_id(question_id: &str, agent_index: u32) -> String {
    format!("{question_id}#a{agent_index}")
}
