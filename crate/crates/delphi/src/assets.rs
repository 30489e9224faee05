//! Prompt templates and blocklists shipped with the crate.
//!
//! Templates use named `{placeholder}` slots filled by [`render_template`].
//! Blocklist files are plain text: one entry per line, `#` comments ignored.

/// Judge prompt for auditing a forecast trace for knowledge of the outcome.
/// Placeholders: `{question}`, `{news_end_date}`, `{resolution_date}`,
/// `{resolution}`, `{model_name}`, `{probability:.4f}`, `{model_output}`.
pub const FOREKNOWLEDGE_JUDGE_PROMPT: &str =
    include_str!("../assets/foreknowledge_judge_prompt.txt");

/// Rewording prompt turning a market title + rules into a single yes/no
/// question. Placeholders: `{title}`, `{rules}`.
pub const REWORD_PROMPT: &str = include_str!("../assets/reword_prompt.txt");

/// Forecasting-agent prompt. Placeholders: `{question}`, `{cutoff}`,
/// `{resolution_date}`, `{market_line}`, `{max_stages}`, `{evidence}`.
pub const AGENT_PROMPT: &str = include_str!("../assets/agent_prompt.txt");

/// Supervisor step 1 (disagreement summary + clarifying queries).
/// Placeholders: `{question}`, `{cutoff}`, `{resolution_date}`, `{panel}`,
/// `{query_cap}`.
pub const SUPERVISOR_SUMMARY_PROMPT: &str =
    include_str!("../assets/supervisor_summary_prompt.txt");

/// Supervisor step 3 (revision with confidence grade). Placeholders:
/// `{question}`, `{cutoff}`, `{resolution_date}`, `{panel}`, `{summary}`,
/// `{evidence}`, `{aggregate}`.
pub const SUPERVISOR_REVISE_PROMPT: &str =
    include_str!("../assets/supervisor_revise_prompt.txt");

/// Best-of-k supervisor prompt. Placeholders: `{question}`, `{cutoff}`,
/// `{resolution_date}`, `{panel}`, `{candidates}`.
pub const BEST_OF_K_PROMPT: &str = include_str!("../assets/best_of_k_prompt.txt");

/// Query-generation prompt for single-shot (non-agentic) search.
/// Placeholders: `{k}`, `{question}`, `{cutoff}`.
pub const NONAGENTIC_QUERIES_PROMPT: &str =
    include_str!("../assets/nonagentic_queries_prompt.txt");

/// URLs excluded from search results for leaking post-cutoff content.
pub const LEAKAGE_URLS: &str = include_str!("../assets/leakage_urls.txt");

/// Prediction-market platform domains, blocked when prices must be hidden.
pub const MARKET_DOMAINS: &str = include_str!("../assets/market_domains.txt");

/// Parse a blocklist asset: trims lines, drops blanks and `#` comments.
pub fn parse_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

/// Fill `{name}` slots in a template. Slot names may contain any characters
/// except `}` (so `{probability:.4f}` is a valid single slot name). Unknown
/// slots are left intact so missing substitutions are visible in output.
pub fn render_template(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in slots {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}
