//! Benchmark construction from prediction-market dumps: liquidity filters,
//! cutoff schedules, question generation and rewording, and live snapshots.

use crate::domain::{
    validate_question, DomainError, Probability, Question, QuestionSource, ValidatedQuestion,
};
use crate::providers::{
    generate_with_retries, GatewayError, GenerationGateway, GenerationRequest, RetryPolicy, Usage,
};
use crate::stats::{derive_seed, seeded_rng};
use crate::assets;
use chrono::NaiveDate;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("market {market_id}: open for only {days} day(s); too short to schedule cutoffs")]
    MarketTooShort { market_id: String, days: i64 },
    #[error("market {market_id}: {reason}")]
    BadMarket { market_id: String, reason: String },
    #[error("market {market_id}: rewording rejected: {reason}")]
    RewordRejected { market_id: String, reason: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// One observed market price.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PricePoint {
    pub date: NaiveDate,
    pub price: Probability,
}

/// A raw prediction-market listing as ingested from a dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketRecord {
    pub market_id: String,
    pub title: String,
    pub rules: String,
    pub open_time: NaiveDate,
    pub close_time: NaiveDate,
    /// Realized resolution date, when the market has resolved.
    #[serde(default)]
    pub resolution_time: Option<NaiveDate>,
    /// Realized outcome; present exactly when `resolution_time` is.
    #[serde(default)]
    pub outcome: Option<f64>,
    pub total_contracts: u64,
    #[serde(default)]
    pub price_history: Vec<PricePoint>,
    pub category: String,
}

impl MarketRecord {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |reason: String| BenchError::BadMarket {
            market_id: self.market_id.clone(),
            reason,
        };
        if self.open_time >= self.close_time {
            return Err(bad(format!(
                "open_time {} is not before close_time {}",
                self.open_time, self.close_time
            )));
        }
        if self.resolution_time.is_some() != self.outcome.is_some() {
            return Err(bad(
                "resolution_time and outcome must be present together".to_string(),
            ));
        }
        if let Some(o) = self.outcome {
            if o != 0.0 && o != 1.0 {
                return Err(bad(format!("outcome {o} is not binary")));
            }
        }
        Ok(())
    }

    /// Days the market was open.
    pub fn open_days(&self) -> i64 {
        (self.close_time - self.open_time).num_days()
    }

    /// The date questions are anchored to: the realized resolution when the
    /// market has one, else the posted close.
    pub fn anchor_date(&self) -> NaiveDate {
        self.resolution_time.unwrap_or(self.close_time)
    }
}

/// Last observed price at or before `cutoff` (last-observation-carried-forward).
pub fn price_at_cutoff(history: &[PricePoint], cutoff: NaiveDate) -> Option<Probability> {
    history
        .iter()
        .filter(|p| p.date <= cutoff)
        .max_by_key(|p| p.date)
        .map(|p| p.price)
}

/// Liquidity and topic filters applied before question generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Keep markets open at least this many days (boundary inclusive).
    pub min_open_days: i64,
    /// Keep markets with at least this many contracts traded (inclusive).
    pub min_contracts: u64,
    /// Case-insensitive category allowlist; sports and weather stay out by
    /// not being listed.
    pub allowed_categories: Vec<String>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_open_days: 7,
            min_contracts: 5000,
            allowed_categories: [
                "politics",
                "policy",
                "economics",
                "markets",
                "ai",
                "technology",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }
}

impl FilterConfig {
    pub fn allows_category(&self, category: &str) -> bool {
        let c = category.trim().to_ascii_lowercase();
        self.allowed_categories
            .iter()
            .any(|a| a.trim().eq_ignore_ascii_case(&c))
    }
}

/// Keep markets that are liquid enough, open long enough, and on-topic.
pub fn filter_markets(records: Vec<MarketRecord>, config: &FilterConfig) -> Vec<MarketRecord> {
    records
        .into_iter()
        .filter(|m| {
            m.open_days() >= config.min_open_days
                && m.total_contracts >= config.min_contracts
                && config.allows_category(&m.category)
        })
        .collect()
}

/// Days-before-anchor schedule for a market open `close - open` days:
/// long markets get fixed lookbacks, shorter ones get compressed schedules
/// ending at the full span; markets open ≤ 7 days cannot be scheduled.
pub fn cutoff_schedule(open_time: NaiveDate, close_time: NaiveDate) -> Option<Vec<i64>> {
    let diff = (close_time - open_time).num_days();
    if diff > 91 {
        Some(vec![1, 7, 30, 60, 90])
    } else if diff > 30 {
        Some(vec![1, 7, 14, 21, diff])
    } else if diff > 7 {
        Some(vec![1, 3, 5, 7, diff])
    } else {
        None
    }
}

/// One question per schedule entry, with `text` as the question sentence.
///
/// Cutoffs are `anchor − days` (anchor = realized resolution when present,
/// else the posted close); the resolution date shown to forecasters is always
/// the posted close; the market price is the last observation at or before
/// each cutoff (absent when the history starts later).
pub fn generate_questions(
    market: &MarketRecord,
    text: &str,
) -> Result<Vec<ValidatedQuestion>, BenchError> {
    market.validate()?;
    let schedule = cutoff_schedule(market.open_time, market.close_time).ok_or_else(|| {
        BenchError::MarketTooShort {
            market_id: market.market_id.clone(),
            days: market.open_days(),
        }
    })?;
    let anchor = market.anchor_date();
    schedule
        .iter()
        .map(|days| {
            let cutoff = anchor - chrono::Duration::days(*days);
            let question = Question {
                id: format!("{}@{}d", market.market_id, days),
                text: text.to_string(),
                knowledge_cutoff: cutoff,
                resolution_date: market.close_time,
                outcome: market.outcome,
                market_price: price_at_cutoff(&market.price_history, cutoff),
                source: QuestionSource::Retrospective,
                category: Some(market.category.clone()),
            };
            validate_question(question).map_err(BenchError::from)
        })
        .collect()
}

/// Reword a templatized market title + rules into a single yes/no question
/// via the generation gateway. Multi-line or non-question output gets one
/// reprompt; persistent malformed output rejects the market with a reason.
pub fn reword_market(
    market: &MarketRecord,
    generation: &dyn GenerationGateway,
    base_request: &GenerationRequest,
    policy: RetryPolicy,
    usage: &mut Usage,
) -> Result<String, BenchError> {
    let reject = |reason: &str| BenchError::RewordRejected {
        market_id: market.market_id.clone(),
        reason: reason.to_string(),
    };
    if market.title.trim().is_empty() || market.rules.trim().is_empty() {
        return Err(reject("title and rules must be non-empty"));
    }
    let scope = format!("market:{}/reword", market.market_id);
    let prompt = assets::render_template(
        assets::REWORD_PROMPT,
        &[("title", &market.title), ("rules", &market.rules)],
    );
    let degrade = |err: GatewayError| -> BenchError {
        if err.aborts_run() {
            BenchError::Gateway(err)
        } else {
            BenchError::RewordRejected {
                market_id: market.market_id.clone(),
                reason: format!("gateway failure: {err}"),
            }
        }
    };
    let first = generate_with_retries(
        generation,
        &scope,
        &base_request.with_prompt(prompt.clone()),
        policy,
        usage,
    )
    .map_err(degrade)?;
    if let Some(q) = clean_single_question(&first.text) {
        return Ok(q);
    }
    let reprompt = format!(
        "{prompt}\n\nYour previous output was not a single question. Output exactly one \
         sentence ending with a question mark and nothing else."
    );
    let second = generate_with_retries(
        generation,
        &scope,
        &base_request.with_prompt(reprompt),
        policy,
        usage,
    )
    .map_err(degrade)?;
    clean_single_question(&second.text)
        .ok_or_else(|| reject("output was not a single yes/no question after one reprompt"))
}

/// Accept exactly one non-empty line ending in `?`.
fn clean_single_question(text: &str) -> Option<String> {
    let trimmed = text.trim();
    if trimmed.is_empty() || trimmed.lines().count() != 1 || !trimmed.ends_with('?') {
        return None;
    }
    if trimmed.len() < 2 {
        return None;
    }
    // A second sentence smuggled onto the same line is still malformed.
    let body = &trimmed[..trimmed.len() - 1];
    if body.contains('?') || body.contains(". ") {
        return None;
    }
    Some(trimmed.to_string())
}

/// A dated sample of live (unresolved) markets turned into questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotDataset {
    pub snapshot_date: NaiveDate,
    pub questions: Vec<ValidatedQuestion>,
    /// True when fewer markets were available than requested.
    pub shortfall: bool,
    pub requested: u32,
    pub available: u32,
    pub seed: u64,
}

/// Filter currently-open markets and sample `sample_size` of them without
/// replacement (seeded); when fewer are available, take them all and flag the
/// shortfall. Each sampled market becomes one unresolved question with the
/// snapshot date as its knowledge cutoff.
pub fn snapshot_live(
    records: Vec<MarketRecord>,
    sample_size: u32,
    seed: u64,
    snapshot_date: NaiveDate,
    filter: &FilterConfig,
) -> Result<SnapshotDataset, BenchError> {
    let open: Vec<MarketRecord> = filter_markets(records, filter)
        .into_iter()
        .filter(|m| m.close_time > snapshot_date)
        .collect();
    let available = open.len() as u32;
    let chosen: Vec<&MarketRecord> = if available <= sample_size {
        open.iter().collect()
    } else {
        let n = open.len();
        let size = sample_size as usize;
        let mut rng = seeded_rng(derive_seed(seed, "snapshot"));
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..size {
            let j = rng.gen_range(i..n);
            idx.swap(i, j);
        }
        let mut picked = idx[..size].to_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| &open[i]).collect()
    };
    let questions = chosen
        .into_iter()
        .map(|m| {
            validate_question(Question {
                id: format!("{}@{}", m.market_id, snapshot_date),
                text: m.title.clone(),
                knowledge_cutoff: snapshot_date,
                resolution_date: m.close_time,
                outcome: None,
                market_price: price_at_cutoff(&m.price_history, snapshot_date),
                source: QuestionSource::Live,
                category: Some(m.category.clone()),
            })
            .map_err(BenchError::from)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SnapshotDataset {
        snapshot_date,
        questions,
        shortfall: available < sample_size,
        requested: sample_size,
        available,
        seed,
    })
}
