//! Gateways to generation and search backends, with deterministic scripted
//! mocks for offline runs.
//!
//! The scripted gateway replays records from a script file:
//! - **Scoped** records (`scope` set, e.g. `"q:q1/agent:0"`) form a FIFO
//!   queue per scope and are consumed once each — replay order is exact.
//! - **Unscoped** records are stateless fallbacks matched by `pattern`.
//! - Any request nothing matches is a hard [`GatewayError::ScriptMiss`], so
//!   a test with an incomplete script fails loudly instead of improvising.
//!
//! Search responses carry a virtual clock (one tick per search within a
//! scope) so artifacts are byte-identical across runs and resumes.

use crate::assets;
use crate::domain::{EvidenceItem, ValidatedQuestion};
use crate::files::{self, FileError};
use chrono::{NaiveDate, NaiveDateTime};
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayKind {
    Generation,
    Search,
}

impl fmt::Display for GatewayKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GatewayKind::Generation => write!(f, "generation"),
            GatewayKind::Search => write!(f, "search"),
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    /// Worth retrying (rate limit, timeout).
    #[error("transient {kind} failure: {message}")]
    Transient { kind: GatewayKind, message: String },
    /// Not worth retrying, but the caller may degrade gracefully.
    #[error("{kind} failure: {message}")]
    Fatal { kind: GatewayKind, message: String },
    /// A scripted gateway had no record for this request. Always aborts.
    #[error("script miss: no {kind} record for scope {scope:?} (request: {request})")]
    ScriptMiss {
        kind: GatewayKind,
        scope: String,
        request: String,
    },
    /// The per-gateway request budget ran out. Always aborts.
    #[error("{kind} budget exhausted ({budget} requests)")]
    BudgetExhausted { kind: GatewayKind, budget: u64 },
}

impl GatewayError {
    /// Errors that must abort the whole run rather than degrade one agent:
    /// script misses (the test harness is broken) and budget exhaustion.
    pub fn aborts_run(&self) -> bool {
        matches!(
            self,
            GatewayError::ScriptMiss { .. } | GatewayError::BudgetExhausted { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub system: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model: String,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, model: impl Into<String>) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            system: String::new(),
            temperature: 0.0,
            max_tokens: 2048,
            model: model.into(),
        }
    }

    /// Same decoding settings, different prompt.
    pub fn with_prompt(&self, prompt: impl Into<String>) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRequest {
    pub query: String,
    /// Intended information cutoff; echoed into every returned item.
    pub date_cutoff: NaiveDate,
    pub max_results: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub snippet: String,
    pub url: String,
    #[serde(default)]
    pub published_date: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub hits: Vec<SearchHit>,
    pub latency_ms: u64,
    pub retrieved_at: NaiveDateTime,
}

/// Text-in/text-out generation backend. `scope` identifies the logical
/// caller (question/agent/supervisor/judge) for replay routing and auditing.
pub trait GenerationGateway: Sync {
    fn generate(
        &self,
        scope: &str,
        req: &GenerationRequest,
    ) -> Result<GenerationResponse, GatewayError>;
}

/// Query-in/snippets-out search backend.
pub trait SearchGateway: Sync {
    fn search(&self, scope: &str, req: &SearchRequest) -> Result<SearchResponse, GatewayError>;
}

// ---------------------------------------------------------------------------
// Scripted mock gateway
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRecord {
    pub kind: GatewayKind,
    /// FIFO consume-once when set; stateless pattern fallback when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<String>,
    /// Regex the request text (prompt or query) must match.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    /// Generation response text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    /// Search response hits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hits: Option<Vec<SearchHit>>,
    /// `"transient"` or `"fatal"`: reply with that error instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub latency_ms: u64,
}

impl ScriptRecord {
    pub fn generation(scope: &str, response: &str) -> Self {
        ScriptRecord {
            kind: GatewayKind::Generation,
            scope: Some(scope.to_string()),
            pattern: None,
            response: Some(response.to_string()),
            hits: None,
            error: None,
            latency_ms: 0,
        }
    }

    pub fn search(scope: &str, hits: Vec<SearchHit>) -> Self {
        ScriptRecord {
            kind: GatewayKind::Search,
            scope: Some(scope.to_string()),
            pattern: None,
            response: None,
            hits: Some(hits),
            error: None,
            latency_ms: 0,
        }
    }

    /// Stateless fallback matching every request of `kind`.
    pub fn fallback_generation(response: &str) -> Self {
        ScriptRecord {
            scope: None,
            ..ScriptRecord::generation("", response)
        }
    }

    pub fn fallback_search(hits: Vec<SearchHit>) -> Self {
        ScriptRecord {
            scope: None,
            ..ScriptRecord::search("", hits)
        }
    }

    pub fn with_pattern(mut self, pattern: &str) -> Self {
        self.pattern = Some(pattern.to_string());
        self
    }

    pub fn with_error(mut self, error: &str) -> Self {
        self.error = Some(error.to_string());
        self.response = None;
        self.hits = None;
        self
    }

    pub fn with_latency(mut self, ms: u64) -> Self {
        self.latency_ms = ms;
        self
    }
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("script record {index}: {reason}")]
    BadRecord { index: usize, reason: String },
    #[error(transparent)]
    File(#[from] FileError),
}

#[derive(Clone)]
struct CompiledRecord {
    pattern: Option<Regex>,
    response: String,
    hits: Vec<SearchHit>,
    error: Option<String>,
    latency_ms: u64,
}

/// One gateway call as seen by the mock, for test assertions.
#[derive(Debug, Clone, PartialEq)]
pub struct CallLog {
    pub kind: GatewayKind,
    pub scope: String,
    pub request: String,
    pub ok: bool,
}

struct ScriptState {
    scoped: HashMap<(GatewayKind, String), VecDeque<CompiledRecord>>,
    unscoped_generation: Vec<CompiledRecord>,
    unscoped_search: Vec<CompiledRecord>,
    /// Virtual clock: per-scope search tick count.
    clock: HashMap<String, u32>,
    transcript: Vec<CallLog>,
}

/// Deterministic replay gateway implementing both provider traits.
pub struct ScriptedGateways {
    state: Mutex<ScriptState>,
}

/// Epoch of the virtual clock stamped on mock search responses.
pub fn virtual_epoch() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2000, 1, 1)
        .expect("valid epoch date")
        .and_hms_opt(0, 0, 0)
        .expect("valid epoch time")
}

impl ScriptedGateways {
    pub fn from_records(records: Vec<ScriptRecord>) -> Result<Self, ScriptError> {
        let mut state = ScriptState {
            scoped: HashMap::new(),
            unscoped_generation: Vec::new(),
            unscoped_search: Vec::new(),
            clock: HashMap::new(),
            transcript: Vec::new(),
        };
        for (index, rec) in records.into_iter().enumerate() {
            let pattern = match &rec.pattern {
                Some(p) => Some(Regex::new(p).map_err(|e| ScriptError::BadRecord {
                    index,
                    reason: format!("bad pattern regex: {e}"),
                })?),
                None => None,
            };
            if let Some(err) = &rec.error {
                if err != "transient" && err != "fatal" {
                    return Err(ScriptError::BadRecord {
                        index,
                        reason: format!("error must be \"transient\" or \"fatal\", got {err:?}"),
                    });
                }
            } else {
                match rec.kind {
                    GatewayKind::Generation if rec.response.is_none() => {
                        return Err(ScriptError::BadRecord {
                            index,
                            reason: "generation record needs `response` or `error`".to_string(),
                        });
                    }
                    GatewayKind::Search if rec.hits.is_none() => {
                        return Err(ScriptError::BadRecord {
                            index,
                            reason: "search record needs `hits` or `error`".to_string(),
                        });
                    }
                    _ => {}
                }
            }
            let compiled = CompiledRecord {
                pattern,
                response: rec.response.unwrap_or_default(),
                hits: rec.hits.unwrap_or_default(),
                error: rec.error,
                latency_ms: rec.latency_ms,
            };
            match rec.scope {
                Some(scope) => state
                    .scoped
                    .entry((rec.kind, scope))
                    .or_default()
                    .push_back(compiled),
                None => match rec.kind {
                    GatewayKind::Generation => state.unscoped_generation.push(compiled),
                    GatewayKind::Search => state.unscoped_search.push(compiled),
                },
            }
        }
        Ok(ScriptedGateways {
            state: Mutex::new(state),
        })
    }

    /// Everything the mock has been asked so far, in call order.
    pub fn transcript(&self) -> Vec<CallLog> {
        self.state.lock().expect("mock lock").transcript.clone()
    }

    /// Scoped records not yet consumed — assert 0 to prove a script ran fully.
    pub fn remaining_scoped(&self) -> usize {
        self.state
            .lock()
            .expect("mock lock")
            .scoped
            .values()
            .map(VecDeque::len)
            .sum()
    }

    fn next_record(
        state: &mut ScriptState,
        kind: GatewayKind,
        scope: &str,
        request: &str,
    ) -> Result<CompiledRecord, GatewayError> {
        let miss = |state: &mut ScriptState| {
            state.transcript.push(CallLog {
                kind,
                scope: scope.to_string(),
                request: truncate(request),
                ok: false,
            });
            Err(GatewayError::ScriptMiss {
                kind,
                scope: scope.to_string(),
                request: truncate(request),
            })
        };
        let key = (kind, scope.to_string());
        let rec = match state.scoped.get_mut(&key) {
            Some(queue) if !queue.is_empty() => {
                let rec = queue.pop_front().expect("non-empty queue");
                if let Some(pat) = &rec.pattern {
                    if !pat.is_match(request) {
                        return miss(state);
                    }
                }
                rec
            }
            _ => {
                let pool = match kind {
                    GatewayKind::Generation => &state.unscoped_generation,
                    GatewayKind::Search => &state.unscoped_search,
                };
                match pool
                    .iter()
                    .find(|r| r.pattern.as_ref().is_none_or(|p| p.is_match(request)))
                {
                    Some(rec) => rec.clone(),
                    None => return miss(state),
                }
            }
        };
        state.transcript.push(CallLog {
            kind,
            scope: scope.to_string(),
            request: truncate(request),
            ok: rec.error.is_none(),
        });
        Ok(rec)
    }
}

fn truncate(s: &str) -> String {
    const LIMIT: usize = 120;
    if s.len() <= LIMIT {
        s.to_string()
    } else {
        let cut = s
            .char_indices()
            .take_while(|(i, _)| *i < LIMIT)
            .last()
            .map(|(i, c)| i + c.len_utf8())
            .unwrap_or(0);
        format!("{}…", &s[..cut])
    }
}

fn scripted_error(kind: GatewayKind, rec: &CompiledRecord) -> Option<GatewayError> {
    match rec.error.as_deref() {
        Some("transient") => Some(GatewayError::Transient {
            kind,
            message: "scripted".to_string(),
        }),
        Some(_) => Some(GatewayError::Fatal {
            kind,
            message: "scripted".to_string(),
        }),
        None => None,
    }
}

impl GenerationGateway for ScriptedGateways {
    fn generate(
        &self,
        scope: &str,
        req: &GenerationRequest,
    ) -> Result<GenerationResponse, GatewayError> {
        let mut state = self.state.lock().expect("mock lock");
        let rec = Self::next_record(&mut state, GatewayKind::Generation, scope, &req.prompt)?;
        if let Some(err) = scripted_error(GatewayKind::Generation, &rec) {
            return Err(err);
        }
        Ok(GenerationResponse {
            text: rec.response.clone(),
            prompt_tokens: (req.prompt.len() / 4) as u64,
            completion_tokens: (rec.response.len() / 4) as u64,
            latency_ms: rec.latency_ms,
        })
    }
}

impl SearchGateway for ScriptedGateways {
    fn search(&self, scope: &str, req: &SearchRequest) -> Result<SearchResponse, GatewayError> {
        let mut state = self.state.lock().expect("mock lock");
        let rec = Self::next_record(&mut state, GatewayKind::Search, scope, &req.query)?;
        if let Some(err) = scripted_error(GatewayKind::Search, &rec) {
            return Err(err);
        }
        let tick = state.clock.entry(scope.to_string()).or_insert(0);
        *tick += 1;
        let retrieved_at = virtual_epoch() + chrono::Duration::seconds(i64::from(*tick));
        let mut hits = rec.hits.clone();
        hits.truncate(req.max_results as usize);
        Ok(SearchResponse {
            hits,
            latency_ms: rec.latency_ms,
            retrieved_at,
        })
    }
}

/// Load scripted gateways from a tagged `delphi/script/v1` jsonl file.
pub fn mock_script_load(path: &Path) -> Result<ScriptedGateways, ScriptError> {
    let records: Vec<ScriptRecord> = files::read_jsonl(path, files::SCRIPT_SCHEMA)?;
    ScriptedGateways::from_records(records)
}

// ---------------------------------------------------------------------------
// Retries, budgets, concurrency limits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts (first call included).
    pub attempts: u32,
    /// Backoff base; attempt i sleeps `base_ms * 2^i`. Zero disables sleeping
    /// (the right setting for scripted runs).
    pub base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_ms: 0,
        }
    }
}

/// Per-question gateway accounting, persisted with each run record.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub generation_calls: u64,
    pub search_calls: u64,
    pub virtual_latency_ms: u64,
}

impl Usage {
    pub fn absorb(&mut self, other: Usage) {
        self.generation_calls += other.generation_calls;
        self.search_calls += other.search_calls;
        self.virtual_latency_ms += other.virtual_latency_ms;
    }
}

fn backoff(policy: RetryPolicy, attempt: u32) {
    if policy.base_ms > 0 {
        std::thread::sleep(std::time::Duration::from_millis(
            policy.base_ms << attempt.min(16),
        ));
    }
}

/// Call `generate`, retrying transient failures per `policy`. Every attempt
/// counts toward `usage`.
pub fn generate_with_retries(
    gateway: &dyn GenerationGateway,
    scope: &str,
    req: &GenerationRequest,
    policy: RetryPolicy,
    usage: &mut Usage,
) -> Result<GenerationResponse, GatewayError> {
    let attempts = policy.attempts.max(1);
    let mut last = None;
    for attempt in 0..attempts {
        usage.generation_calls += 1;
        match gateway.generate(scope, req) {
            Ok(resp) => {
                usage.virtual_latency_ms += resp.latency_ms;
                return Ok(resp);
            }
            Err(err @ GatewayError::Transient { .. }) => {
                last = Some(err);
                if attempt + 1 < attempts {
                    backoff(policy, attempt);
                }
            }
            Err(err) => return Err(err),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Call `search`, retrying transient failures per `policy`.
pub fn search_with_retries(
    gateway: &dyn SearchGateway,
    scope: &str,
    req: &SearchRequest,
    policy: RetryPolicy,
    usage: &mut Usage,
) -> Result<SearchResponse, GatewayError> {
    let attempts = policy.attempts.max(1);
    let mut last = None;
    for attempt in 0..attempts {
        usage.search_calls += 1;
        match gateway.search(scope, req) {
            Ok(resp) => {
                usage.virtual_latency_ms += resp.latency_ms;
                return Ok(resp);
            }
            Err(err @ GatewayError::Transient { .. }) => {
                last = Some(err);
                if attempt + 1 < attempts {
                    backoff(policy, attempt);
                }
            }
            Err(err) => return Err(err),
        }
    }
    Err(last.expect("at least one attempt"))
}

struct Gate {
    kind: GatewayKind,
    max_in_flight: usize,
    /// `None` = unlimited.
    budget: Option<u64>,
    state: Mutex<GateState>,
    cv: Condvar,
}

#[derive(Default)]
struct GateState {
    in_flight: usize,
    used: u64,
}

struct GateGuard<'a>(&'a Gate);

impl Gate {
    fn new(kind: GatewayKind, max_in_flight: usize, budget: Option<u64>) -> Self {
        Gate {
            kind,
            max_in_flight: max_in_flight.max(1),
            budget,
            state: Mutex::new(GateState::default()),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Result<GateGuard<'_>, GatewayError> {
        let mut st = self.state.lock().expect("gate lock");
        if let Some(budget) = self.budget {
            if st.used >= budget {
                return Err(GatewayError::BudgetExhausted {
                    kind: self.kind,
                    budget,
                });
            }
            st.used += 1;
        }
        while st.in_flight >= self.max_in_flight {
            st = self.cv.wait(st).expect("gate wait");
        }
        st.in_flight += 1;
        Ok(GateGuard(self))
    }
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut st = self.0.state.lock().expect("gate lock");
        st.in_flight -= 1;
        drop(st);
        self.0.cv.notify_one();
    }
}

/// Wraps a generation gateway with a concurrency cap and a request budget.
pub struct LimitedGeneration<'a> {
    inner: &'a dyn GenerationGateway,
    gate: Gate,
}

impl<'a> LimitedGeneration<'a> {
    pub fn new(inner: &'a dyn GenerationGateway, max_in_flight: usize, budget: Option<u64>) -> Self {
        LimitedGeneration {
            inner,
            gate: Gate::new(GatewayKind::Generation, max_in_flight, budget),
        }
    }
}

impl GenerationGateway for LimitedGeneration<'_> {
    fn generate(
        &self,
        scope: &str,
        req: &GenerationRequest,
    ) -> Result<GenerationResponse, GatewayError> {
        let _guard = self.gate.acquire()?;
        self.inner.generate(scope, req)
    }
}

/// Wraps a search gateway with a concurrency cap and a request budget.
pub struct LimitedSearch<'a> {
    inner: &'a dyn SearchGateway,
    gate: Gate,
}

impl<'a> LimitedSearch<'a> {
    pub fn new(inner: &'a dyn SearchGateway, max_in_flight: usize, budget: Option<u64>) -> Self {
        LimitedSearch {
            inner,
            gate: Gate::new(GatewayKind::Search, max_in_flight, budget),
        }
    }
}

impl SearchGateway for LimitedSearch<'_> {
    fn search(&self, scope: &str, req: &SearchRequest) -> Result<SearchResponse, GatewayError> {
        let _guard = self.gate.acquire()?;
        self.inner.search(scope, req)
    }
}

// ---------------------------------------------------------------------------
// Domain blocklisting and cutoff enforcement
// ---------------------------------------------------------------------------

/// Blocks evidence by host suffix (case-insensitive) or exact URL.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainBlocklist {
    blocked_domains: Vec<String>,
    blocked_urls: Vec<String>,
}

/// Host part of a URL: scheme and path stripped, port dropped, lowercased.
fn host_of(url: &str) -> String {
    let rest = match url.find("://") {
        Some(i) => &url[i + 3..],
        None => url,
    };
    let end = rest.find(['/', '?', '#']).unwrap_or(rest.len());
    let host = &rest[..end];
    let host = host.rsplit('@').next().unwrap_or(host);
    let host = host.split(':').next().unwrap_or(host);
    host.trim().to_ascii_lowercase()
}

/// Case-fold scheme and host, keep the path as-is, drop trailing slashes.
fn normalize_url(url: &str) -> String {
    let url = url.trim();
    let (scheme, rest) = match url.find("://") {
        Some(i) => (&url[..i], &url[i + 3..]),
        None => ("", url),
    };
    let (host, path) = match rest.find('/') {
        Some(i) => (&rest[..i], &rest[i..]),
        None => (rest, ""),
    };
    let path = path.trim_end_matches('/');
    if scheme.is_empty() {
        format!("{}{}", host.to_ascii_lowercase(), path)
    } else {
        format!(
            "{}://{}{}",
            scheme.to_ascii_lowercase(),
            host.to_ascii_lowercase(),
            path
        )
    }
}

impl DomainBlocklist {
    pub fn new(
        domains: impl IntoIterator<Item = String>,
        urls: impl IntoIterator<Item = String>,
    ) -> Self {
        DomainBlocklist {
            blocked_domains: domains
                .into_iter()
                .map(|d| d.trim().trim_start_matches('.').to_ascii_lowercase())
                .filter(|d| !d.is_empty())
                .collect(),
            blocked_urls: urls
                .into_iter()
                .map(|u| normalize_url(&u))
                .filter(|u| !u.is_empty())
                .collect(),
        }
    }

    pub fn empty() -> Self {
        DomainBlocklist::default()
    }

    /// The bundled list of URLs that leak post-cutoff content.
    pub fn leakage_default() -> Self {
        DomainBlocklist::new(Vec::new(), assets::parse_list(assets::LEAKAGE_URLS))
    }

    /// The bundled prediction-market platform domains (price hiding).
    pub fn market_hiding() -> Self {
        DomainBlocklist::new(assets::parse_list(assets::MARKET_DOMAINS), Vec::new())
    }

    pub fn extend(&mut self, other: &DomainBlocklist) {
        self.blocked_domains
            .extend(other.blocked_domains.iter().cloned());
        self.blocked_urls.extend(other.blocked_urls.iter().cloned());
    }

    pub fn is_empty(&self) -> bool {
        self.blocked_domains.is_empty() && self.blocked_urls.is_empty()
    }

    pub fn blocks(&self, url: &str) -> bool {
        let host = host_of(url);
        if self
            .blocked_domains
            .iter()
            .any(|d| host == *d || host.ends_with(&format!(".{d}")))
        {
            return true;
        }
        if self.blocked_urls.is_empty() {
            return false;
        }
        let normalized = normalize_url(url);
        self.blocked_urls.iter().any(|u| *u == normalized)
    }
}

/// Drop blocked items, preserving order; returns the removal count.
pub fn apply_blocklist(
    items: Vec<EvidenceItem>,
    blocklist: &DomainBlocklist,
) -> (Vec<EvidenceItem>, u32) {
    let before = items.len();
    let kept: Vec<EvidenceItem> = items
        .into_iter()
        .filter(|item| !blocklist.blocks(&item.source_url))
        .collect();
    let removed = (before - kept.len()) as u32;
    (kept, removed)
}

/// Local re-check of the requested date cutoff: items published after the
/// cutoff are dropped; items with no parseable date are kept but counted so
/// the integrity audit can weigh them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CutoffFiltered {
    pub kept: Vec<EvidenceItem>,
    pub dropped_post_cutoff: u32,
    pub undated: u32,
}

pub fn enforce_cutoff(items: Vec<EvidenceItem>, cutoff: NaiveDate) -> CutoffFiltered {
    let mut kept = Vec::with_capacity(items.len());
    let mut dropped = 0u32;
    let mut undated = 0u32;
    for item in items {
        match item.published_date {
            Some(d) if d > cutoff => dropped += 1,
            Some(_) => kept.push(item),
            None => {
                undated += 1;
                kept.push(item);
            }
        }
    }
    CutoffFiltered {
        kept,
        dropped_post_cutoff: dropped,
        undated,
    }
}

/// Turn a search response into audit-complete evidence items.
pub fn evidence_from_response(
    query: &str,
    response: &SearchResponse,
    stage_index: u32,
    requested_cutoff: NaiveDate,
) -> Vec<EvidenceItem> {
    response
        .hits
        .iter()
        .map(|hit| EvidenceItem {
            query: query.to_string(),
            snippet: hit.snippet.clone(),
            source_url: hit.url.clone(),
            published_date: hit.published_date,
            retrieved_at: response.retrieved_at,
            stage_index,
            requested_cutoff,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Single-shot (non-agentic) search
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceFilterAudit {
    pub blocked: u32,
    pub post_cutoff_dropped: u32,
    pub undated: u32,
    pub failed_queries: u32,
}

impl EvidenceFilterAudit {
    pub fn absorb(&mut self, other: EvidenceFilterAudit) {
        self.blocked += other.blocked;
        self.post_cutoff_dropped += other.post_cutoff_dropped;
        self.undated += other.undated;
        self.failed_queries += other.failed_queries;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonAgenticEvidence {
    pub items: Vec<EvidenceItem>,
    pub audit: EvidenceFilterAudit,
}

/// One generation call produces `k` queries; each runs once against the
/// search gateway; results are concatenated (all stage 1). No follow-ups.
///
/// Errors that abort the run propagate. A generation failure or zero usable
/// queries (after one reprompt) is reported as `Fatal`; callers degrade to an
/// evidence-less forecast.
#[allow(clippy::too_many_arguments)]
pub fn search_nonagentic(
    question: &ValidatedQuestion,
    k: u32,
    generation: &dyn GenerationGateway,
    search: &dyn SearchGateway,
    blocklist: &DomainBlocklist,
    base_request: &GenerationRequest,
    max_results: u32,
    policy: RetryPolicy,
    usage: &mut Usage,
    scope: &str,
) -> Result<NonAgenticEvidence, GatewayError> {
    let k = k.max(1);
    let prompt = assets::render_template(
        assets::NONAGENTIC_QUERIES_PROMPT,
        &[
            ("k", &k.to_string()),
            ("question", &question.text),
            ("cutoff", &question.knowledge_cutoff.to_string()),
        ],
    );
    let mut queries = query_lines(
        &generate_with_retries(generation, scope, &base_request.with_prompt(prompt), policy, usage)?
            .text,
        k,
    );
    if queries.is_empty() {
        let reprompt = format!(
            "Output exactly {k} web-search queries for the question below, one per line, \
             with no numbering and no other text.\n\nQUESTION: {}",
            question.text
        );
        queries = query_lines(
            &generate_with_retries(
                generation,
                scope,
                &base_request.with_prompt(reprompt),
                policy,
                usage,
            )?
            .text,
            k,
        );
    }
    if queries.is_empty() {
        return Err(GatewayError::Fatal {
            kind: GatewayKind::Generation,
            message: "no usable search queries produced".to_string(),
        });
    }

    let mut audit = EvidenceFilterAudit::default();
    let mut items = Vec::new();
    for query in &queries {
        let req = SearchRequest {
            query: query.clone(),
            date_cutoff: question.knowledge_cutoff,
            max_results,
        };
        match search_with_retries(search, scope, &req, policy, usage) {
            Ok(resp) => {
                items.extend(evidence_from_response(query, &resp, 1, question.knowledge_cutoff))
            }
            Err(err) if err.aborts_run() => return Err(err),
            Err(_) => audit.failed_queries += 1,
        }
    }
    let (kept, blocked) = apply_blocklist(items, blocklist);
    let filtered = enforce_cutoff(kept, question.knowledge_cutoff);
    audit.blocked = blocked;
    audit.post_cutoff_dropped = filtered.dropped_post_cutoff;
    audit.undated = filtered.undated;
    Ok(NonAgenticEvidence {
        items: filtered.kept,
        audit,
    })
}

/// Parse generated query text: one query per line, deduplicated, max `k`.
fn query_lines(text: &str, k: u32) -> Vec<String> {
    let mut seen = Vec::new();
    for line in text.lines() {
        let q = line.trim().trim_start_matches(['-', '*']).trim();
        let q = q
            .strip_prefix(|c: char| c.is_ascii_digit())
            .map(|r| r.trim_start_matches(['.', ')']).trim())
            .unwrap_or(q);
        if q.is_empty() || seen.iter().any(|s: &String| s == q) {
            continue;
        }
        seen.push(q.to_string());
        if seen.len() as u32 == k {
            break;
        }
    }
    seen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{validate_question, Question, QuestionSource};

    fn date(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn hit(url: &str, published: Option<&str>) -> SearchHit {
        SearchHit {
            snippet: format!("snippet from {url}"),
            url: url.to_string(),
            published_date: published.map(date),
        }
    }

    fn gen_req(prompt: &str) -> GenerationRequest {
        GenerationRequest::new(prompt, "scripted-v1")
    }

    fn search_req(query: &str) -> SearchRequest {
        SearchRequest {
            query: query.to_string(),
            date_cutoff: date("2024-03-01"),
            max_results: 10,
        }
    }

    #[test]
    fn scoped_records_replay_in_fifo_order_and_consume_once() {
        let gws = ScriptedGateways::from_records(vec![
            ScriptRecord::generation("q:a/agent:0", "first"),
            ScriptRecord::generation("q:a/agent:0", "second"),
        ])
        .unwrap();
        assert_eq!(gws.generate("q:a/agent:0", &gen_req("x")).unwrap().text, "first");
        assert_eq!(gws.generate("q:a/agent:0", &gen_req("x")).unwrap().text, "second");
        assert!(matches!(
            gws.generate("q:a/agent:0", &gen_req("x")),
            Err(GatewayError::ScriptMiss { .. })
        ));
        assert_eq!(gws.remaining_scoped(), 0);
    }

    #[test]
    fn unscoped_records_are_stateless_pattern_fallbacks() {
        let gws = ScriptedGateways::from_records(vec![
            ScriptRecord::fallback_generation("match A").with_pattern("alpha"),
            ScriptRecord::fallback_generation("anything"),
        ])
        .unwrap();
        assert_eq!(gws.generate("s", &gen_req("has alpha inside")).unwrap().text, "match A");
        assert_eq!(gws.generate("s", &gen_req("other")).unwrap().text, "anything");
        // Stateless: the same record answers again.
        assert_eq!(gws.generate("s", &gen_req("other")).unwrap().text, "anything");
    }

    #[test]
    fn scoped_pattern_mismatch_is_a_loud_miss() {
        let gws = ScriptedGateways::from_records(vec![ScriptRecord::generation(
            "q:a/agent:0",
            "resp",
        )
        .with_pattern("expected words")])
        .unwrap();
        assert!(matches!(
            gws.generate("q:a/agent:0", &gen_req("different prompt")),
            Err(GatewayError::ScriptMiss { .. })
        ));
    }

    #[test]
    fn unmatched_request_misses_with_scope_in_error() {
        let gws = ScriptedGateways::from_records(vec![]).unwrap();
        let err = gws.generate("q:z/agent:3", &gen_req("hello")).unwrap_err();
        assert!(err.aborts_run());
        assert!(err.to_string().contains("q:z/agent:3"), "{err}");
    }

    #[test]
    fn scripted_transient_then_success_recovers_under_retries() {
        let gws = ScriptedGateways::from_records(vec![
            ScriptRecord::generation("s", "").with_error("transient"),
            ScriptRecord::generation("s", "").with_error("transient"),
            ScriptRecord::generation("s", "ok").with_latency(7),
        ])
        .unwrap();
        let mut usage = Usage::default();
        let resp =
            generate_with_retries(&gws, "s", &gen_req("p"), RetryPolicy::default(), &mut usage)
                .unwrap();
        assert_eq!(resp.text, "ok");
        assert_eq!(usage.generation_calls, 3);
        assert_eq!(usage.virtual_latency_ms, 7);
    }

    #[test]
    fn retries_exhaust_into_the_last_transient_error() {
        let gws = ScriptedGateways::from_records(vec![
            ScriptRecord::generation("s", "").with_error("transient"),
            ScriptRecord::generation("s", "").with_error("transient"),
            ScriptRecord::generation("s", "").with_error("transient"),
        ])
        .unwrap();
        let mut usage = Usage::default();
        let err =
            generate_with_retries(&gws, "s", &gen_req("p"), RetryPolicy::default(), &mut usage)
                .unwrap_err();
        assert!(matches!(err, GatewayError::Transient { .. }));
        assert_eq!(usage.generation_calls, 3);
    }

    #[test]
    fn fatal_scripted_error_is_not_retried() {
        let gws = ScriptedGateways::from_records(vec![
            ScriptRecord::generation("s", "").with_error("fatal"),
            ScriptRecord::generation("s", "never reached"),
        ])
        .unwrap();
        let mut usage = Usage::default();
        let err =
            generate_with_retries(&gws, "s", &gen_req("p"), RetryPolicy::default(), &mut usage)
                .unwrap_err();
        assert!(matches!(err, GatewayError::Fatal { .. }));
        assert_eq!(usage.generation_calls, 1);
        assert_eq!(gws.remaining_scoped(), 1);
    }

    #[test]
    fn virtual_clock_ticks_per_scope() {
        let gws = ScriptedGateways::from_records(vec![
            ScriptRecord::search("a", vec![hit("https://x.test/1", None)]),
            ScriptRecord::search("a", vec![hit("https://x.test/2", None)]),
            ScriptRecord::search("b", vec![hit("https://x.test/3", None)]),
        ])
        .unwrap();
        let t1 = gws.search("a", &search_req("q")).unwrap().retrieved_at;
        let t2 = gws.search("a", &search_req("q")).unwrap().retrieved_at;
        let t3 = gws.search("b", &search_req("q")).unwrap().retrieved_at;
        assert_eq!(t1, virtual_epoch() + chrono::Duration::seconds(1));
        assert_eq!(t2, virtual_epoch() + chrono::Duration::seconds(2));
        assert_eq!(t3, virtual_epoch() + chrono::Duration::seconds(1));
    }

    #[test]
    fn search_truncates_to_max_results() {
        let gws = ScriptedGateways::from_records(vec![ScriptRecord::search(
            "s",
            vec![
                hit("https://x.test/1", None),
                hit("https://x.test/2", None),
                hit("https://x.test/3", None),
            ],
        )])
        .unwrap();
        let mut req = search_req("q");
        req.max_results = 2;
        assert_eq!(gws.search("s", &req).unwrap().hits.len(), 2);
    }

    #[test]
    fn script_records_validate_on_load() {
        let bad = ScriptRecord {
            response: None,
            ..ScriptRecord::generation("s", "x")
        };
        let err = ScriptedGateways::from_records(vec![bad]).unwrap_err();
        assert!(err.to_string().contains("needs `response`"), "{err}");

        let bad_err = ScriptRecord::generation("s", "x").with_error("flaky");
        assert!(ScriptedGateways::from_records(vec![bad_err]).is_err());
    }

    #[test]
    fn script_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.jsonl");
        let records = vec![
            ScriptRecord::generation("q:a/agent:0", "FINAL: 0.62"),
            ScriptRecord::fallback_search(vec![hit("https://news.test/a", Some("2024-02-01"))]),
        ];
        files::write_jsonl(&path, files::SCRIPT_SCHEMA, &records).unwrap();
        let gws = mock_script_load(&path).unwrap();
        assert_eq!(
            gws.generate("q:a/agent:0", &gen_req("p")).unwrap().text,
            "FINAL: 0.62"
        );
        assert_eq!(gws.search("anywhere", &search_req("q")).unwrap().hits.len(), 1);
    }

    #[test]
    fn budget_exhaustion_aborts_with_code_worthy_error() {
        let gws = ScriptedGateways::from_records(vec![
            ScriptRecord::fallback_generation("ok"),
        ])
        .unwrap();
        let limited = LimitedGeneration::new(&gws, 4, Some(2));
        assert!(limited.generate("s", &gen_req("a")).is_ok());
        assert!(limited.generate("s", &gen_req("b")).is_ok());
        let err = limited.generate("s", &gen_req("c")).unwrap_err();
        assert!(matches!(err, GatewayError::BudgetExhausted { budget: 2, .. }));
        assert!(err.aborts_run());
    }

    #[test]
    fn limiter_is_safe_under_concurrent_use() {
        let gws = ScriptedGateways::from_records(vec![ScriptRecord::fallback_generation("ok")])
            .unwrap();
        let limited = LimitedGeneration::new(&gws, 2, Some(64));
        std::thread::scope(|scope| {
            for _ in 0..8 {
                scope.spawn(|| {
                    for _ in 0..8 {
                        limited.generate("s", &gen_req("p")).unwrap();
                    }
                });
            }
        });
        assert_eq!(gws.transcript().len(), 64);
    }

    #[test]
    fn transcript_records_calls_in_order() {
        let gws = ScriptedGateways::from_records(vec![
            ScriptRecord::generation("s1", "a"),
            ScriptRecord::search("s2", vec![]),
        ])
        .unwrap();
        gws.generate("s1", &gen_req("p1")).unwrap();
        gws.search("s2", &search_req("q1")).unwrap();
        let t = gws.transcript();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].kind, GatewayKind::Generation);
        assert_eq!(t[0].scope, "s1");
        assert!(t[0].ok);
        assert_eq!(t[1].kind, GatewayKind::Search);
    }

    // --- blocklist ---

    #[test]
    fn exact_url_blocking_hits_the_listed_ranking_page() {
        let bl = DomainBlocklist::leakage_default();
        assert!(bl.blocks("https://en.wikipedia.org/wiki/FIDE_rankings"));
        assert!(bl.blocks("HTTPS://EN.WIKIPEDIA.ORG/wiki/FIDE_rankings/"));
        // Same host, different page: not blocked by the URL list.
        assert!(!bl.blocks("https://en.wikipedia.org/wiki/Chess"));
    }

    #[test]
    fn domain_blocking_matches_host_suffix_case_insensitively() {
        let bl = DomainBlocklist::new(vec!["nasdaq.com".to_string()], vec![]);
        assert!(bl.blocks("https://www.nasdaq.com/market-activity/stocks/tsco"));
        assert!(bl.blocks("https://NASDAQ.com/anything"));
        assert!(bl.blocks("http://data.api.nasdaq.com:8080/x"));
        assert!(!bl.blocks("https://notnasdaq.com/x"));
        assert!(!bl.blocks("https://nasdaq.com.evil.test/x"));
    }

    #[test]
    fn market_hiding_list_blocks_platform_hosts() {
        let bl = DomainBlocklist::market_hiding();
        assert!(bl.blocks("https://polymarket.com/event/some-market"));
        assert!(bl.blocks("https://www.kalshi.com/markets/abc"));
        assert!(!bl.blocks("https://example.org/polymarket.com"));
    }

    fn item(url: &str, published: Option<&str>) -> EvidenceItem {
        EvidenceItem {
            query: "q".to_string(),
            snippet: "s".to_string(),
            source_url: url.to_string(),
            published_date: published.map(date),
            retrieved_at: virtual_epoch(),
            stage_index: 1,
            requested_cutoff: date("2024-03-01"),
        }
    }

    #[test]
    fn apply_blocklist_preserves_order_and_counts() {
        let bl = DomainBlocklist::new(vec!["bad.test".to_string()], vec![]);
        let items = vec![
            item("https://ok.test/1", None),
            item("https://bad.test/x", None),
            item("https://ok.test/2", None),
        ];
        let (kept, removed) = apply_blocklist(items, &bl);
        assert_eq!(removed, 1);
        assert_eq!(
            kept.iter().map(|i| i.source_url.as_str()).collect::<Vec<_>>(),
            vec!["https://ok.test/1", "https://ok.test/2"]
        );
    }

    #[test]
    fn empty_blocklist_is_identity_and_blocking_is_idempotent() {
        let items = vec![item("https://a.test/1", None), item("https://b.test/2", None)];
        let (kept, removed) = apply_blocklist(items.clone(), &DomainBlocklist::empty());
        assert_eq!(removed, 0);
        assert_eq!(kept, items);

        let bl = DomainBlocklist::new(vec!["a.test".to_string()], vec![]);
        let (once, r1) = apply_blocklist(items, &bl);
        let (twice, r2) = apply_blocklist(once.clone(), &bl);
        assert_eq!(r1, 1);
        assert_eq!(r2, 0);
        assert_eq!(once, twice);
    }

    #[test]
    fn all_items_blocked_yields_empty_with_full_count() {
        let bl = DomainBlocklist::new(vec!["x.test".to_string()], vec![]);
        let (kept, removed) = apply_blocklist(
            vec![item("https://x.test/1", None), item("https://x.test/2", None)],
            &bl,
        );
        assert!(kept.is_empty());
        assert_eq!(removed, 2);
    }

    #[test]
    fn cutoff_enforcement_drops_late_items_and_counts_undated() {
        let cutoff = date("2024-03-01");
        let filtered = enforce_cutoff(
            vec![
                item("https://a.test/1", Some("2024-02-28")),
                item("https://a.test/2", Some("2024-03-01")),
                item("https://a.test/3", Some("2024-03-02")),
                item("https://a.test/4", None),
            ],
            cutoff,
        );
        assert_eq!(filtered.kept.len(), 3);
        assert_eq!(filtered.dropped_post_cutoff, 1);
        assert_eq!(filtered.undated, 1);
    }

    // --- non-agentic search ---

    fn live_question() -> ValidatedQuestion {
        validate_question(Question {
            id: "q1".to_string(),
            text: "Will the reservoir refill by spring?".to_string(),
            knowledge_cutoff: date("2024-03-01"),
            resolution_date: date("2024-05-01"),
            outcome: None,
            market_price: None,
            source: QuestionSource::Manual,
            category: None,
        })
        .unwrap()
    }

    #[test]
    fn nonagentic_search_runs_each_query_once_in_order() {
        let q = live_question();
        let gws = ScriptedGateways::from_records(vec![
            ScriptRecord::generation("q:q1/agent:0", "reservoir levels\nspring rainfall outlook"),
            ScriptRecord::search("q:q1/agent:0", vec![hit("https://a.test/1", Some("2024-02-01"))])
                .with_pattern("reservoir levels"),
            ScriptRecord::search("q:q1/agent:0", vec![hit("https://a.test/2", Some("2024-02-15"))])
                .with_pattern("spring rainfall outlook"),
        ])
        .unwrap();
        let mut usage = Usage::default();
        let out = search_nonagentic(
            &q,
            3,
            &gws,
            &gws,
            &DomainBlocklist::empty(),
            &gen_req(""),
            10,
            RetryPolicy::default(),
            &mut usage,
            "q:q1/agent:0",
        )
        .unwrap();
        assert_eq!(out.items.len(), 2);
        assert_eq!(out.items[0].query, "reservoir levels");
        assert_eq!(out.items[1].query, "spring rainfall outlook");
        assert!(out.items.iter().all(|i| i.stage_index == 1));
        assert!(out.items.iter().all(|i| i.requested_cutoff == q.knowledge_cutoff));
        assert_eq!(usage.generation_calls, 1);
        assert_eq!(usage.search_calls, 2);
        assert_eq!(gws.remaining_scoped(), 0);
    }

    #[test]
    fn nonagentic_search_filters_blocked_domains() {
        let q = live_question();
        let gws = ScriptedGateways::from_records(vec![
            ScriptRecord::generation("s", "one query"),
            ScriptRecord::search(
                "s",
                vec![
                    hit("https://polymarket.com/event/thing", Some("2024-02-01")),
                    hit("https://ok.test/a", Some("2024-02-01")),
                ],
            ),
        ])
        .unwrap();
        let mut usage = Usage::default();
        let out = search_nonagentic(
            &q,
            1,
            &gws,
            &gws,
            &DomainBlocklist::market_hiding(),
            &gen_req(""),
            10,
            RetryPolicy::default(),
            &mut usage,
            "s",
        )
        .unwrap();
        assert_eq!(out.items.len(), 1);
        assert_eq!(out.audit.blocked, 1);
    }

    #[test]
    fn nonagentic_reprompts_once_for_queries_then_degrades() {
        let q = live_question();
        let gws = ScriptedGateways::from_records(vec![
            ScriptRecord::generation("s", "   \n  "),
            ScriptRecord::generation("s", "\n\n"),
        ])
        .unwrap();
        let mut usage = Usage::default();
        let err = search_nonagentic(
            &q,
            2,
            &gws,
            &gws,
            &DomainBlocklist::empty(),
            &gen_req(""),
            10,
            RetryPolicy::default(),
            &mut usage,
            "s",
        )
        .unwrap_err();
        assert!(matches!(err, GatewayError::Fatal { .. }));
        assert!(!err.aborts_run());
        assert_eq!(usage.generation_calls, 2);
    }

    #[test]
    fn query_lines_strip_bullets_and_numbering_and_dedupe() {
        let parsed = query_lines("1. alpha beta\n- gamma\n2) alpha beta\n\n* delta\n", 10);
        assert_eq!(parsed, vec!["alpha beta", "gamma", "delta"]);
        assert_eq!(query_lines("a\nb\nc", 2), vec!["a", "b"]);
    }
}
