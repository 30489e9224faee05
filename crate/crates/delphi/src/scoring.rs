//! Brier scoring, survey baselines, and paired significance testing.
//!
//! The primary loss is the Brier score `(forecast - outcome)^2`; lower is
//! better, and a constant 0.5 forecaster scores exactly 0.25 against any
//! outcome mix. Forecast comparisons use a recentered paired bootstrap over
//! per-question score differences plus a tie-aware win rate.

use crate::domain::{Outcome, Probability};
use crate::stats::{mean, seeded_rng};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("empty input: nothing to score")]
    Empty,
    #[error("need at least 2 paired questions, got {0}")]
    TooFewPairs(usize),
    #[error("paired lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("survey values must be finite")]
    NonFiniteValue,
    #[error("resample count must be positive")]
    ZeroResamples,
}

/// Brier score of a probability against a resolved outcome.
pub fn brier(p: Probability, outcome: Outcome) -> f64 {
    let d = p.value() - outcome.as_f64();
    d * d
}

/// Brier-style divergence of a forecast from a reference probability
/// (e.g. a market price on an unresolved question).
pub fn brier_vs_reference(p: Probability, reference: Probability) -> f64 {
    let d = p.value() - reference.value();
    d * d
}

/// Per-question score plus the dataset mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub question_id: String,
    pub brier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub n_questions: usize,
    pub mean_brier: f64,
    pub per_question: Vec<QuestionScore>,
}

/// Score a set of (question, forecast, outcome) rows. Order is preserved.
pub fn score_forecasts(
    rows: &[(String, Probability, Outcome)],
) -> Result<ScoreReport, ScoringError> {
    if rows.is_empty() {
        return Err(ScoringError::Empty);
    }
    let per_question: Vec<QuestionScore> = rows
        .iter()
        .map(|(id, p, o)| QuestionScore {
            question_id: id.clone(),
            brier: brier(*p, *o),
        })
        .collect();
    let mean_brier = mean(&per_question.iter().map(|q| q.brier).collect::<Vec<_>>());
    Ok(ScoreReport {
        n_questions: per_question.len(),
        mean_brier,
        per_question,
    })
}

/// Mean divergence of forecasts from reference probabilities over a dataset.
pub fn mean_brier_vs_reference(
    pairs: &[(Probability, Probability)],
) -> Result<f64, ScoringError> {
    if pairs.is_empty() {
        return Err(ScoringError::Empty);
    }
    Ok(mean(
        &pairs
            .iter()
            .map(|(p, r)| brier_vs_reference(*p, *r))
            .collect::<Vec<_>>(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurveyStat {
    Mean,
    Median,
}

/// Collapse a list of survey responses into a single baseline value.
/// The median of an even count is the midpoint of the two central values.
pub fn aggregate_survey(values: &[f64], stat: SurveyStat) -> Result<f64, ScoringError> {
    if values.is_empty() {
        return Err(ScoringError::Empty);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(ScoringError::NonFiniteValue);
    }
    match stat {
        SurveyStat::Mean => Ok(mean(values)),
        SurveyStat::Median => {
            let mut sorted = values.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = sorted.len();
            if n % 2 == 1 {
                Ok(sorted[n / 2])
            } else {
                Ok((sorted[n / 2 - 1] + sorted[n / 2]) / 2.0)
            }
        }
    }
}

/// Result of a paired comparison between two forecast systems.
///
/// `mean_diff` is the observed mean of the per-question differences
/// (system A minus system B, so negative favors A on Brier loss).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub n_questions: usize,
    pub mean_diff: f64,
    pub p_value: f64,
    pub win_rate: f64,
    pub n_resamples: u32,
    pub seed: u64,
}

/// Recentered paired bootstrap over per-question score differences.
///
/// Differences are recentered to mean zero, resampled with replacement
/// `n_resamples` times, and the two-sided p-value is the fraction of
/// resampled means at least as extreme as the observed mean, with the
/// observed statistic counted in its own tail (so p is never zero):
/// `p = (#{|mean*| >= |observed|} + 1) / (n_resamples + 1)`.
pub fn paired_bootstrap(
    diffs: &[f64],
    n_resamples: u32,
    seed: u64,
) -> Result<PairedComparison, ScoringError> {
    if diffs.len() < 2 {
        return Err(ScoringError::TooFewPairs(diffs.len()));
    }
    if n_resamples == 0 {
        return Err(ScoringError::ZeroResamples);
    }
    let n = diffs.len();
    let observed = mean(diffs);
    let recentered: Vec<f64> = diffs.iter().map(|d| d - observed).collect();

    let mut rng = seeded_rng(seed);
    let mut extreme: u64 = 0;
    for _ in 0..n_resamples {
        let mut sum = 0.0;
        for _ in 0..n {
            sum += recentered[rng.gen_range(0..n)];
        }
        if (sum / n as f64).abs() >= observed.abs() {
            extreme += 1;
        }
    }
    let p_value = (extreme + 1) as f64 / (u64::from(n_resamples) + 1) as f64;

    let wins = diffs.iter().filter(|d| **d < 0.0).count() as f64;
    let ties = diffs.iter().filter(|d| **d == 0.0).count() as f64;
    let win_rate = (wins + 0.5 * ties) / n as f64;

    Ok(PairedComparison {
        n_questions: n,
        mean_diff: observed,
        p_value,
        win_rate,
        n_resamples,
        seed,
    })
}

/// Fraction of questions where system A strictly beats system B on Brier
/// loss; ties contribute half a win.
pub fn win_rate(briers_a: &[f64], briers_b: &[f64]) -> Result<f64, ScoringError> {
    if briers_a.len() != briers_b.len() {
        return Err(ScoringError::LengthMismatch(briers_a.len(), briers_b.len()));
    }
    if briers_a.is_empty() {
        return Err(ScoringError::Empty);
    }
    let mut score = 0.0;
    for (a, b) in briers_a.iter().zip(briers_b) {
        if a < b {
            score += 1.0;
        } else if a == b {
            score += 0.5;
        }
    }
    Ok(score / briers_a.len() as f64)
}
