//! One forecasting agent: a prompt/search loop that must end in a
//! `FINAL: <probability>` commitment.

use super::config::SearchMode;
use crate::assets;
use crate::domain::{
    CitedPassage, EvidenceItem, ForecastRecord, Probability, ReasoningTrace, ValidatedQuestion,
};
use crate::providers::{
    apply_blocklist, enforce_cutoff, evidence_from_response, generate_with_retries,
    search_nonagentic, search_with_retries, DomainBlocklist, EvidenceFilterAudit, GatewayError,
    GenerationGateway, GenerationRequest, RetryPolicy, SearchGateway, SearchRequest, Usage,
};

/// Why an agent produced no forecast.
#[derive(Debug)]
pub enum AgentError {
    /// The whole run must stop (script miss, exhausted budget).
    Abort(GatewayError),
    /// This agent is lost; the panel continues without it.
    Failed { agent_index: u32, reason: String },
}

/// Everything an agent needs besides the question.
pub struct AgentDeps<'a> {
    pub generation: &'a dyn GenerationGateway,
    pub search: &'a dyn SearchGateway,
    pub blocklist: &'a DomainBlocklist,
    pub base_request: &'a GenerationRequest,
    pub policy: RetryPolicy,
    pub search_mode: SearchMode,
    pub max_stages: u32,
    pub nonagentic_queries: u32,
    pub max_results: u32,
    pub include_market_price: bool,
}

#[derive(Debug)]
pub struct AgentOutcome {
    pub record: ForecastRecord,
    /// Human-readable degradation notes (failed searches, reprompts).
    pub notes: Vec<String>,
    pub protocol_violations: u32,
    pub audit: EvidenceFilterAudit,
    pub usage: Usage,
}

/// Render gathered evidence the way agent and supervisor prompts show it.
pub fn format_evidence(items: &[EvidenceItem]) -> String {
    if items.is_empty() {
        return "(none)".to_string();
    }
    let mut out = String::new();
    for item in items {
        let date = item
            .published_date
            .map(|d| d.to_string())
            .unwrap_or_else(|| "undated".to_string());
        out.push_str(&format!(
            "- [stage {} | {}] query {:?}: {} ({})\n",
            item.stage_index, date, item.query, item.snippet, item.source_url
        ));
    }
    out
}

fn market_line(question: &ValidatedQuestion, include: bool) -> String {
    match (include, question.market_price) {
        (true, Some(price)) => {
            format!("MARKET PRICE: the market currently prices YES at {price}.")
        }
        _ => String::new(),
    }
}

fn render_agent_prompt(
    question: &ValidatedQuestion,
    include_market_price: bool,
    stages_left: u32,
    evidence: &[EvidenceItem],
) -> String {
    assets::render_template(
        assets::AGENT_PROMPT,
        &[
            ("question", &question.text),
            ("cutoff", &question.knowledge_cutoff.to_string()),
            ("resolution_date", &question.resolution_date.to_string()),
            ("market_line", &market_line(question, include_market_price)),
            ("max_stages", &stages_left.to_string()),
            ("evidence", &format_evidence(evidence)),
        ],
    )
}

/// Find `PREFIX: rest` on any line; returns the trimmed rest.
pub fn protocol_line<'t>(text: &'t str, prefix: &str) -> Option<&'t str> {
    text.lines().find_map(|line| {
        line.trim()
            .strip_prefix(prefix)
            .map(str::trim)
            .filter(|rest| !rest.is_empty())
    })
}

/// Parse a probability from protocol text; accepts a trailing percent sign.
pub fn parse_probability(text: &str) -> Option<Probability> {
    let trimmed = text.trim();
    let (number, scale) = match trimmed.strip_suffix('%') {
        Some(stripped) => (stripped.trim(), 100.0),
        None => (trimmed, 1.0),
    };
    let value: f64 = number.parse().ok()?;
    Probability::new(value / scale).ok()
}

fn cite_lines(text: &str) -> Vec<CitedPassage> {
    text.lines()
        .filter_map(|line| {
            let rest = line.trim().strip_prefix("CITE:")?;
            let (url, passage) = rest.split_once("::")?;
            let url = url.trim();
            let passage = passage.trim();
            if url.is_empty() || passage.is_empty() {
                return None;
            }
            Some(CitedPassage {
                text: passage.to_string(),
                source_url: url.to_string(),
            })
        })
        .collect()
}

/// Run one agent to a committed forecast.
///
/// Search failures degrade (the agent continues on what it has); generation
/// failures lose the agent; script misses and budget exhaustion abort the
/// run. A protocol violation (no usable FINAL/SEARCH action) gets exactly one
/// corrective reprompt before the agent is declared lost.
pub fn run_agent(
    question: &ValidatedQuestion,
    agent_index: u32,
    deps: &AgentDeps,
) -> Result<AgentOutcome, AgentError> {
    let scope = format!("q:{}/agent:{}", question.id, agent_index);
    let mut usage = Usage::default();
    let mut audit = EvidenceFilterAudit::default();
    let mut notes = Vec::new();
    let mut violations = 0u32;
    let mut evidence: Vec<EvidenceItem> = Vec::new();
    let mut steps: Vec<String> = Vec::new();
    let mut cited: Vec<CitedPassage> = Vec::new();

    // Non-agentic search happens before the model sees the question.
    if deps.search_mode == SearchMode::NonAgentic {
        match search_nonagentic(
            question,
            deps.nonagentic_queries,
            deps.generation,
            deps.search,
            deps.blocklist,
            deps.base_request,
            deps.max_results,
            deps.policy,
            &mut usage,
            &scope,
        ) {
            Ok(found) => {
                audit.absorb(found.audit);
                evidence = found.items;
            }
            Err(err) if err.aborts_run() => return Err(AgentError::Abort(err)),
            Err(err) => {
                notes.push(format!("up-front search unavailable: {err}"));
                audit.failed_queries += 1;
            }
        }
    }

    let mut stages_used = 0u32;
    let stages_total = match deps.search_mode {
        SearchMode::Agentic => deps.max_stages,
        SearchMode::None | SearchMode::NonAgentic => 0,
    };
    let mut reprompt_available = true;
    let mut demand: Option<String> = None;

    loop {
        let mut prompt = render_agent_prompt(
            question,
            deps.include_market_price,
            stages_total - stages_used,
            &evidence,
        );
        if let Some(extra) = demand.take() {
            prompt.push_str("\n\n");
            prompt.push_str(&extra);
        }
        let response = match generate_with_retries(
            deps.generation,
            &scope,
            &deps.base_request.with_prompt(prompt),
            deps.policy,
            &mut usage,
        ) {
            Ok(resp) => resp,
            Err(err) if err.aborts_run() => return Err(AgentError::Abort(err)),
            Err(err) => {
                return Err(AgentError::Failed {
                    agent_index,
                    reason: format!("generation failed: {err}"),
                })
            }
        };
        steps.push(response.text.clone());
        cited.extend(cite_lines(&response.text));

        if let Some(rest) = protocol_line(&response.text, "FINAL:") {
            match parse_probability(rest) {
                Some(probability) => {
                    return Ok(AgentOutcome {
                        record: ForecastRecord {
                            question_id: question.id.clone(),
                            agent_index,
                            probability,
                            trace: ReasoningTrace {
                                steps,
                                cited_passages: cited,
                            },
                            evidence,
                        },
                        notes,
                        protocol_violations: violations,
                        audit,
                        usage,
                    });
                }
                None => {
                    violations += 1;
                    if !reprompt_available {
                        return Err(AgentError::Failed {
                            agent_index,
                            reason: format!("unparseable FINAL value {rest:?}"),
                        });
                    }
                    reprompt_available = false;
                    notes.push(format!("reprompted after malformed FINAL {rest:?}"));
                    demand = Some(
                        "Your FINAL line did not contain a probability between 0 and 1. \
                         Reply again with a single line:  FINAL: <probability>"
                            .to_string(),
                    );
                    continue;
                }
            }
        }

        if let Some(query) = protocol_line(&response.text, "SEARCH:") {
            let can_search = deps.search_mode == SearchMode::Agentic && stages_used < stages_total;
            if can_search {
                stages_used += 1;
                let request = SearchRequest {
                    query: query.to_string(),
                    date_cutoff: question.knowledge_cutoff,
                    max_results: deps.max_results,
                };
                match search_with_retries(deps.search, &scope, &request, deps.policy, &mut usage) {
                    Ok(found) => {
                        let items =
                            evidence_from_response(query, &found, stages_used, question.knowledge_cutoff);
                        let (kept, blocked) = apply_blocklist(items, deps.blocklist);
                        let filtered = enforce_cutoff(kept, question.knowledge_cutoff);
                        audit.blocked += blocked;
                        audit.post_cutoff_dropped += filtered.dropped_post_cutoff;
                        audit.undated += filtered.undated;
                        evidence.extend(filtered.kept);
                    }
                    Err(err) if err.aborts_run() => return Err(AgentError::Abort(err)),
                    Err(err) => {
                        audit.failed_queries += 1;
                        notes.push(format!("search failed for {query:?}: {err}"));
                        demand = Some(format!(
                            "The search for {query:?} failed; continue with the evidence you \
                             already have."
                        ));
                    }
                }
                continue;
            }
            // Search requested but unavailable: out of stages or disabled.
            violations += 1;
            if !reprompt_available {
                return Err(AgentError::Failed {
                    agent_index,
                    reason: "kept searching with no searches available".to_string(),
                });
            }
            reprompt_available = false;
            let why = if deps.search_mode == SearchMode::Agentic {
                "You have used all of your searches."
            } else {
                "Search is not available in this run."
            };
            notes.push("reprompted to force a FINAL answer".to_string());
            demand = Some(format!(
                "{why} Commit to an answer now with a single line:  FINAL: <probability>"
            ));
            continue;
        }

        // Neither FINAL nor SEARCH: protocol violation.
        violations += 1;
        if !reprompt_available {
            return Err(AgentError::Failed {
                agent_index,
                reason: "no FINAL or SEARCH action after reprompt".to_string(),
            });
        }
        reprompt_available = false;
        notes.push("reprompted after a response with no protocol action".to_string());
        demand = Some(
            "Your reply contained no action. Reply with either  SEARCH: <query>  or  \
             FINAL: <probability>"
                .to_string(),
        );
    }
}
