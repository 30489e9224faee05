//! Supervision of a finished panel: reconcile disagreement into one number.

use super::agent::{format_evidence, parse_probability, protocol_line};
use super::config::SupervisorMode;
use crate::aggregation::{
    best_of_k_enforce, merge_supervisor, Confidence, SupervisorOutput, BEST_OF_K_TOLERANCE,
};
use crate::assets;
use crate::domain::{EvidenceItem, ForecastRecord, Probability, ValidatedQuestion};
use crate::providers::{
    apply_blocklist, enforce_cutoff, evidence_from_response, generate_with_retries,
    search_with_retries, DomainBlocklist, EvidenceFilterAudit, GatewayError, GenerationGateway,
    GenerationRequest, RetryPolicy, SearchGateway, SearchRequest, Usage,
};
use serde::{Deserialize, Serialize};

/// What the supervision stage did and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisorRecord {
    pub mode: SupervisorMode,
    /// The structured revision, when one was produced and parsed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<SupervisorOutput>,
    /// The panel value after supervision (before calibration).
    pub merged: Probability,
    /// True when a best-of-k choice had to be snapped into the candidate set.
    pub violation: bool,
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evidence: Vec<EvidenceItem>,
    #[serde(default, skip_serializing_if = "is_default_audit")]
    pub audit: EvidenceFilterAudit,
}

fn is_default_audit(a: &EvidenceFilterAudit) -> bool {
    *a == EvidenceFilterAudit::default()
}

pub struct SupervisorDeps<'a> {
    pub generation: &'a dyn GenerationGateway,
    pub search: &'a dyn SearchGateway,
    pub blocklist: &'a DomainBlocklist,
    pub base_request: &'a GenerationRequest,
    pub policy: RetryPolicy,
    pub mode: SupervisorMode,
    pub query_cap: u32,
    pub max_results: u32,
}

/// Render the panel for supervisor prompts: each agent's forecast and its
/// reasoning, in agent order.
fn format_panel(records: &[ForecastRecord]) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&format!(
            "AGENT {} FORECAST {}:\n{}\n\n",
            record.agent_index,
            record.probability,
            record.trace.steps.join("\n")
        ));
    }
    out
}

fn common_slots<'q>(
    question: &'q ValidatedQuestion,
    panel: &'q str,
) -> [(&'static str, String); 4] {
    [
        ("question", question.text.clone()),
        ("cutoff", question.knowledge_cutoff.to_string()),
        ("resolution_date", question.resolution_date.to_string()),
        ("panel", panel.to_string()),
    ]
}

fn render(template: &str, slots: &[(&str, String)]) -> String {
    let borrowed: Vec<(&str, &str)> = slots.iter().map(|(k, v)| (*k, v.as_str())).collect();
    assets::render_template(template, &borrowed)
}

fn fallback(
    mode: SupervisorMode,
    aggregate: Probability,
    note: String,
    evidence: Vec<EvidenceItem>,
    audit: EvidenceFilterAudit,
) -> SupervisorRecord {
    SupervisorRecord {
        mode,
        output: None,
        merged: aggregate,
        violation: false,
        notes: vec![note],
        evidence,
        audit,
    }
}

/// Parse a `REVISED:`/`CONFIDENCE:` reply.
fn parse_revision(text: &str) -> Option<(Probability, Confidence)> {
    let revised = parse_probability(protocol_line(text, "REVISED:")?)?;
    let confidence = match protocol_line(text, "CONFIDENCE:")?.to_ascii_lowercase().as_str() {
        "high" => Confidence::High,
        "medium" => Confidence::Medium,
        "low" => Confidence::Low,
        _ => return None,
    };
    Some((revised, confidence))
}

fn query_lines_capped(text: &str, cap: u32) -> Vec<String> {
    text.lines()
        .filter_map(|line| {
            line.trim()
                .strip_prefix("QUERY:")
                .map(str::trim)
                .filter(|q| !q.is_empty())
                .map(str::to_string)
        })
        .take(cap as usize)
        .collect()
}

/// Run the configured supervision mode over a finished panel.
///
/// Only abort-class gateway errors propagate; anything else degrades to the
/// plain aggregate with a note. `SupervisorMode::None` is the caller's
/// responsibility (no record is produced for it).
pub fn run_supervisor(
    question: &ValidatedQuestion,
    records: &[ForecastRecord],
    aggregate: Probability,
    deps: &SupervisorDeps,
    usage: &mut Usage,
) -> Result<SupervisorRecord, GatewayError> {
    debug_assert!(deps.mode != SupervisorMode::None);
    let scope = format!("q:{}/supervisor", question.id);
    let panel = format_panel(records);
    match deps.mode {
        SupervisorMode::None => Ok(fallback(
            deps.mode,
            aggregate,
            "supervision disabled".to_string(),
            Vec::new(),
            EvidenceFilterAudit::default(),
        )),
        SupervisorMode::BestOfK => {
            best_of_k(question, records, aggregate, deps, &scope, &panel, usage)
        }
        SupervisorMode::NonAgentic => {
            let summary = "(no separate analysis step: single-call review)".to_string();
            revise(
                question,
                aggregate,
                deps,
                &scope,
                &panel,
                &summary,
                Vec::new(),
                Vec::new(),
                EvidenceFilterAudit::default(),
                usage,
            )
        }
        SupervisorMode::Agentic => agentic(question, aggregate, deps, &scope, &panel, usage),
    }
}

fn best_of_k(
    question: &ValidatedQuestion,
    records: &[ForecastRecord],
    aggregate: Probability,
    deps: &SupervisorDeps,
    scope: &str,
    panel: &str,
    usage: &mut Usage,
) -> Result<SupervisorRecord, GatewayError> {
    let candidates: Vec<Probability> = records.iter().map(|r| r.probability).collect();
    let candidate_list = candidates
        .iter()
        .map(|p| p.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    let mut slots: Vec<(&str, String)> = common_slots(question, panel).to_vec();
    slots.push(("candidates", candidate_list));
    let mut prompt = render(assets::BEST_OF_K_PROMPT, &slots);
    for attempt in 0..2 {
        let response =
            match generate_with_retries(deps.generation, scope, &deps.base_request.with_prompt(prompt.clone()), deps.policy, usage) {
                Ok(resp) => resp,
                Err(err) if err.aborts_run() => return Err(err),
                Err(err) => {
                    return Ok(fallback(
                        deps.mode,
                        aggregate,
                        format!("best-of-k supervisor unavailable, using aggregate: {err}"),
                        Vec::new(),
                        EvidenceFilterAudit::default(),
                    ))
                }
            };
        if let Some(choice) = protocol_line(&response.text, "CHOICE:").and_then(parse_probability)
        {
            let enforced = best_of_k_enforce(&candidates, choice, BEST_OF_K_TOLERANCE)
                .expect("panel is non-empty");
            let mut notes = Vec::new();
            if enforced.violation {
                notes.push(format!(
                    "choice {choice} was not a candidate; snapped to {}",
                    enforced.value
                ));
            }
            return Ok(SupervisorRecord {
                mode: deps.mode,
                output: None,
                merged: enforced.value,
                violation: enforced.violation,
                notes,
                evidence: Vec::new(),
                audit: EvidenceFilterAudit::default(),
            });
        }
        if attempt == 0 {
            prompt.push_str(
                "\n\nYour reply did not name a candidate. Reply with a single line:  \
                 CHOICE: <one of the candidate probabilities>",
            );
        }
    }
    Ok(fallback(
        deps.mode,
        aggregate,
        "best-of-k choice unparseable after reprompt, using aggregate".to_string(),
        Vec::new(),
        EvidenceFilterAudit::default(),
    ))
}

#[allow(clippy::too_many_arguments)]
fn revise(
    question: &ValidatedQuestion,
    aggregate: Probability,
    deps: &SupervisorDeps,
    scope: &str,
    panel: &str,
    summary: &str,
    queries: Vec<String>,
    evidence: Vec<EvidenceItem>,
    audit: EvidenceFilterAudit,
    usage: &mut Usage,
) -> Result<SupervisorRecord, GatewayError> {
    let mut slots: Vec<(&str, String)> = common_slots(question, panel).to_vec();
    slots.push(("summary", summary.to_string()));
    slots.push(("evidence", format_evidence(&evidence)));
    slots.push(("aggregate", aggregate.to_string()));
    let mut prompt = render(assets::SUPERVISOR_REVISE_PROMPT, &slots);
    for attempt in 0..2 {
        let response =
            match generate_with_retries(deps.generation, scope, &deps.base_request.with_prompt(prompt.clone()), deps.policy, usage) {
                Ok(resp) => resp,
                Err(err) if err.aborts_run() => return Err(err),
                Err(err) => {
                    return Ok(fallback(
                        deps.mode,
                        aggregate,
                        format!("supervisor revision unavailable, using aggregate: {err}"),
                        evidence,
                        audit,
                    ))
                }
            };
        if let Some((revised, confidence)) = parse_revision(&response.text) {
            let output = SupervisorOutput {
                disagreement_summary: summary.to_string(),
                clarifying_queries: queries,
                revised_probability: revised,
                confidence,
            };
            let merged = merge_supervisor(aggregate, &output);
            return Ok(SupervisorRecord {
                mode: deps.mode,
                output: Some(output),
                merged,
                violation: false,
                notes: Vec::new(),
                evidence,
                audit,
            });
        }
        if attempt == 0 {
            prompt.push_str(
                "\n\nYour reply was malformed. Reply with exactly two lines:\n\
                 REVISED: <probability between 0 and 1>\nCONFIDENCE: <high|medium|low>",
            );
        }
    }
    Ok(fallback(
        deps.mode,
        aggregate,
        "supervisor revision unparseable after reprompt, using aggregate".to_string(),
        evidence,
        audit,
    ))
}

fn agentic(
    question: &ValidatedQuestion,
    aggregate: Probability,
    deps: &SupervisorDeps,
    scope: &str,
    panel: &str,
    usage: &mut Usage,
) -> Result<SupervisorRecord, GatewayError> {
    // Step 1: disagreement analysis with optional clarifying queries.
    let mut slots: Vec<(&str, String)> = common_slots(question, panel).to_vec();
    slots.push(("query_cap", deps.query_cap.to_string()));
    let summary_prompt = render(assets::SUPERVISOR_SUMMARY_PROMPT, &slots);
    let summary = match generate_with_retries(
        deps.generation,
        scope,
        &deps.base_request.with_prompt(summary_prompt),
        deps.policy,
        usage,
    ) {
        Ok(resp) => resp.text,
        Err(err) if err.aborts_run() => return Err(err),
        Err(err) => {
            return Ok(fallback(
                deps.mode,
                aggregate,
                format!("supervisor analysis unavailable, using aggregate: {err}"),
                Vec::new(),
                EvidenceFilterAudit::default(),
            ))
        }
    };

    // Step 2: run the clarifying queries (skipped entirely at cap 0).
    let queries = if deps.query_cap == 0 {
        Vec::new()
    } else {
        query_lines_capped(&summary, deps.query_cap)
    };
    let mut evidence = Vec::new();
    let mut audit = EvidenceFilterAudit::default();
    let mut notes = Vec::new();
    for (i, query) in queries.iter().enumerate() {
        let request = SearchRequest {
            query: query.clone(),
            date_cutoff: question.knowledge_cutoff,
            max_results: deps.max_results,
        };
        match search_with_retries(deps.search, scope, &request, deps.policy, usage) {
            Ok(found) => {
                let items = evidence_from_response(
                    query,
                    &found,
                    (i + 1) as u32,
                    question.knowledge_cutoff,
                );
                let (kept, blocked) = apply_blocklist(items, deps.blocklist);
                let filtered = enforce_cutoff(kept, question.knowledge_cutoff);
                audit.blocked += blocked;
                audit.post_cutoff_dropped += filtered.dropped_post_cutoff;
                audit.undated += filtered.undated;
                evidence.extend(filtered.kept);
            }
            Err(err) if err.aborts_run() => return Err(err),
            Err(err) => {
                audit.failed_queries += 1;
                notes.push(format!("clarifying query {query:?} failed: {err}"));
            }
        }
    }

    // Step 3: revise with the clarifying evidence in view.
    let mut record = revise(
        question, aggregate, deps, scope, panel, &summary, queries, evidence, audit, usage,
    )?;
    record.notes.extend(notes);
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{validate_question, Question, QuestionSource, ReasoningTrace};
    use crate::providers::{ScriptRecord, ScriptedGateways, SearchHit};

    fn p(v: f64) -> Probability {
        Probability::new(v).unwrap()
    }

    fn question() -> ValidatedQuestion {
        validate_question(Question {
            id: "q1".to_string(),
            text: "Will the new rail line open before July?".to_string(),
            knowledge_cutoff: "2024-03-01".parse().unwrap(),
            resolution_date: "2024-07-01".parse().unwrap(),
            outcome: Some(0.0),
            market_price: None,
            source: QuestionSource::Retrospective,
            category: None,
        })
        .unwrap()
    }

    fn panel_records(values: &[f64]) -> Vec<ForecastRecord> {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| ForecastRecord {
                question_id: "q1".to_string(),
                agent_index: i as u32,
                probability: p(*v),
                trace: ReasoningTrace {
                    steps: vec![format!("agent {i} reasoning")],
                    cited_passages: Vec::new(),
                },
                evidence: Vec::new(),
            })
            .collect()
    }

    fn deps<'a>(
        gws: &'a ScriptedGateways,
        base: &'a GenerationRequest,
        blocklist: &'a DomainBlocklist,
        mode: SupervisorMode,
    ) -> SupervisorDeps<'a> {
        SupervisorDeps {
            generation: gws,
            search: gws,
            blocklist,
            base_request: base,
            policy: RetryPolicy::default(),
            mode,
            query_cap: 2,
            max_results: 5,
        }
    }

    #[test]
    fn best_of_k_picks_a_candidate_verbatim() {
        let gws = ScriptedGateways::from_records(vec![ScriptRecord::generation(
            "q:q1/supervisor",
            "CHOICE: 0.30",
        )
        .with_pattern("(?s)CANDIDATE PROBABILITIES: 0\\.200000, 0\\.300000, 0\\.500000")])
        .unwrap();
        let base = GenerationRequest::new("", "m");
        let bl = DomainBlocklist::empty();
        let records = panel_records(&[0.2, 0.3, 0.5]);
        let mut usage = Usage::default();
        let out = run_supervisor(
            &question(),
            &records,
            p(1.0 / 3.0),
            &deps(&gws, &base, &bl, SupervisorMode::BestOfK),
            &mut usage,
        )
        .unwrap();
        assert!(!out.violation);
        assert!((out.merged.value() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn best_of_k_snaps_off_menu_choices_and_flags_them() {
        let gws = ScriptedGateways::from_records(vec![ScriptRecord::generation(
            "q:q1/supervisor",
            "CHOICE: 0.34",
        )])
        .unwrap();
        let base = GenerationRequest::new("", "m");
        let bl = DomainBlocklist::empty();
        let records = panel_records(&[0.2, 0.3, 0.5]);
        let mut usage = Usage::default();
        let out = run_supervisor(
            &question(),
            &records,
            p(1.0 / 3.0),
            &deps(&gws, &base, &bl, SupervisorMode::BestOfK),
            &mut usage,
        )
        .unwrap();
        assert!(out.violation);
        assert!((out.merged.value() - 0.3).abs() < 1e-12, "snaps to nearest candidate");
        assert!(records.iter().any(|r| r.probability == out.merged));
    }

    #[test]
    fn best_of_k_unparseable_twice_falls_back_to_aggregate() {
        let gws = ScriptedGateways::from_records(vec![
            ScriptRecord::generation("q:q1/supervisor", "the second one seems best"),
            ScriptRecord::generation("q:q1/supervisor", "CHOICE: the median"),
        ])
        .unwrap();
        let base = GenerationRequest::new("", "m");
        let bl = DomainBlocklist::empty();
        let records = panel_records(&[0.2, 0.3, 0.5]);
        let mut usage = Usage::default();
        let agg = p(1.0 / 3.0);
        let out = run_supervisor(
            &question(),
            &records,
            agg,
            &deps(&gws, &base, &bl, SupervisorMode::BestOfK),
            &mut usage,
        )
        .unwrap();
        assert_eq!(out.merged, agg);
        assert!(out.notes[0].contains("unparseable"));
    }

    #[test]
    fn nonagentic_high_confidence_revision_displaces_the_aggregate() {
        let gws = ScriptedGateways::from_records(vec![ScriptRecord::generation(
            "q:q1/supervisor",
            "REVISED: 0.15\nCONFIDENCE: high",
        )])
        .unwrap();
        let base = GenerationRequest::new("", "m");
        let bl = DomainBlocklist::empty();
        let records = panel_records(&[0.2, 0.4]);
        let mut usage = Usage::default();
        let out = run_supervisor(
            &question(),
            &records,
            p(0.3),
            &deps(&gws, &base, &bl, SupervisorMode::NonAgentic),
            &mut usage,
        )
        .unwrap();
        assert!((out.merged.value() - 0.15).abs() < 1e-12);
        assert_eq!(out.output.as_ref().unwrap().confidence, Confidence::High);
    }

    #[test]
    fn low_and_medium_confidence_keep_the_aggregate() {
        for level in ["low", "medium"] {
            let gws = ScriptedGateways::from_records(vec![ScriptRecord::generation(
                "q:q1/supervisor",
                &format!("REVISED: 0.15\nCONFIDENCE: {level}"),
            )])
            .unwrap();
            let base = GenerationRequest::new("", "m");
            let bl = DomainBlocklist::empty();
            let records = panel_records(&[0.2, 0.4]);
            let mut usage = Usage::default();
            let out = run_supervisor(
                &question(),
                &records,
                p(0.3),
                &deps(&gws, &base, &bl, SupervisorMode::NonAgentic),
                &mut usage,
            )
            .unwrap();
            assert!(
                (out.merged.value() - 0.3).abs() < 1e-12,
                "{level} must not displace the aggregate"
            );
            assert!(
                (out.output.as_ref().unwrap().revised_probability.value() - 0.15).abs() < 1e-12,
                "the revision itself is still recorded"
            );
        }
    }

    #[test]
    fn agentic_supervisor_searches_its_queries_then_revises() {
        let gws = ScriptedGateways::from_records(vec![
            ScriptRecord::generation(
                "q:q1/supervisor",
                "QUERY: rail line inspection schedule\n\
                 Agents disagree on whether track certification finished.",
            ),
            ScriptRecord::search(
                "q:q1/supervisor",
                vec![SearchHit {
                    snippet: "Certification paused in February.".to_string(),
                    url: "https://transit.test/cert".to_string(),
                    published_date: Some("2024-02-20".parse().unwrap()),
                }],
            ),
            ScriptRecord::generation("q:q1/supervisor", "REVISED: 0.1\nCONFIDENCE: high")
                .with_pattern("(?s)Certification paused in February"),
        ])
        .unwrap();
        let base = GenerationRequest::new("", "m");
        let bl = DomainBlocklist::empty();
        let records = panel_records(&[0.2, 0.4]);
        let mut usage = Usage::default();
        let out = run_supervisor(
            &question(),
            &records,
            p(0.3),
            &deps(&gws, &base, &bl, SupervisorMode::Agentic),
            &mut usage,
        )
        .unwrap();
        assert!((out.merged.value() - 0.1).abs() < 1e-12);
        assert_eq!(out.evidence.len(), 1);
        assert_eq!(out.output.as_ref().unwrap().clarifying_queries.len(), 1);
        assert_eq!(usage.search_calls, 1);
        assert_eq!(usage.generation_calls, 2);
    }

    #[test]
    fn query_cap_zero_skips_the_search_step() {
        let gws = ScriptedGateways::from_records(vec![
            ScriptRecord::generation(
                "q:q1/supervisor",
                "QUERY: should be ignored\nDisagreement is about base rates.",
            ),
            ScriptRecord::generation("q:q1/supervisor", "REVISED: 0.25\nCONFIDENCE: low"),
        ])
        .unwrap();
        let base = GenerationRequest::new("", "m");
        let bl = DomainBlocklist::empty();
        let records = panel_records(&[0.2, 0.4]);
        let mut usage = Usage::default();
        let mut d = deps(&gws, &base, &bl, SupervisorMode::Agentic);
        d.query_cap = 0;
        let out = run_supervisor(&question(), &records, p(0.3), &d, &mut usage).unwrap();
        assert_eq!(usage.search_calls, 0);
        assert!(out.evidence.is_empty());
        assert!((out.merged.value() - 0.3).abs() < 1e-12, "low confidence keeps aggregate");
    }

    #[test]
    fn agentic_failures_degrade_to_the_aggregate_with_notes() {
        // Step-1 generation fatally fails: supervision is skipped.
        let gws = ScriptedGateways::from_records(vec![ScriptRecord::generation(
            "q:q1/supervisor",
            "",
        )
        .with_error("fatal")])
        .unwrap();
        let base = GenerationRequest::new("", "m");
        let bl = DomainBlocklist::empty();
        let records = panel_records(&[0.2, 0.4]);
        let mut usage = Usage::default();
        let agg = p(0.3);
        let out = run_supervisor(
            &question(),
            &records,
            agg,
            &deps(&gws, &base, &bl, SupervisorMode::Agentic),
            &mut usage,
        )
        .unwrap();
        assert_eq!(out.merged, agg);
        assert!(out.output.is_none());
        assert!(out.notes[0].contains("analysis unavailable"));

        // A failed clarifying search degrades but revision still happens.
        let gws2 = ScriptedGateways::from_records(vec![
            ScriptRecord::generation("q:q1/supervisor", "QUERY: certification status\nsummary"),
            ScriptRecord::search("q:q1/supervisor", vec![]).with_error("fatal"),
            ScriptRecord::generation("q:q1/supervisor", "REVISED: 0.2\nCONFIDENCE: high"),
        ])
        .unwrap();
        let mut usage2 = Usage::default();
        let out2 = run_supervisor(
            &question(),
            &records,
            agg,
            &deps(&gws2, &base, &bl, SupervisorMode::Agentic),
            &mut usage2,
        )
        .unwrap();
        assert!((out2.merged.value() - 0.2).abs() < 1e-12);
        assert_eq!(out2.audit.failed_queries, 1);
        assert!(out2.notes.iter().any(|n| n.contains("failed")));

        // Script miss aborts.
        let empty = ScriptedGateways::from_records(vec![]).unwrap();
        let mut usage3 = Usage::default();
        let err = run_supervisor(
            &question(),
            &records,
            agg,
            &deps(&empty, &base, &bl, SupervisorMode::NonAgentic),
            &mut usage3,
        )
        .unwrap_err();
        assert!(err.aborts_run());
    }

    #[test]
    fn revision_reprompt_recovers_a_malformed_reply() {
        let gws = ScriptedGateways::from_records(vec![
            ScriptRecord::generation("q:q1/supervisor", "I'd revise it downward a bit."),
            ScriptRecord::generation("q:q1/supervisor", "REVISED: 0.22\nCONFIDENCE: high")
                .with_pattern("(?s)exactly two lines"),
        ])
        .unwrap();
        let base = GenerationRequest::new("", "m");
        let bl = DomainBlocklist::empty();
        let records = panel_records(&[0.2, 0.4]);
        let mut usage = Usage::default();
        let out = run_supervisor(
            &question(),
            &records,
            p(0.3),
            &deps(&gws, &base, &bl, SupervisorMode::NonAgentic),
            &mut usage,
        )
        .unwrap();
        assert!((out.merged.value() - 0.22).abs() < 1e-12);
    }

    #[test]
    fn parse_revision_cases() {
        assert_eq!(
            parse_revision("REVISED: 0.4\nCONFIDENCE: HIGH").unwrap().1,
            Confidence::High
        );
        assert!(parse_revision("REVISED: 0.4").is_none());
        assert!(parse_revision("CONFIDENCE: high").is_none());
        assert!(parse_revision("REVISED: 1.4\nCONFIDENCE: high").is_none());
        assert!(parse_revision("REVISED: 0.4\nCONFIDENCE: certain").is_none());
    }
}
