//! The surrogate-user decision loop: render context, ask the policy for a
//! thought and an action, run the tool, append the observation, repeat.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::UserHistory;
use crate::llm::{ChatBackend, ChatTurn, LlmError};
use crate::memory::{self, AssemblyOrder, MemoryStore};
use crate::tools::{parse_action, parse_list_reply, resolve_line, ActionError, CandidateEntry, ParsedAction, ToolError, ToolRegistry, ToolType};

pub const CORRECTIVE_OBSERVATION: &str = "Your action could not be parsed; use ToolType[attribute, K]";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("no retrieval tool is registered")]
    NoTools,
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Tool(#[from] ToolError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub max_rounds: usize,
    pub malformed_budget: usize,
    /// Final list length N.
    pub n: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self { max_rounds: 8, malformed_budget: 3, n: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Finish,
    RoundCap,
    BackendFailure,
    /// More malformed actions than the corrective budget allows.
    MalformedLimit,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::Finish => "finish",
            Termination::RoundCap => "round_cap",
            Termination::BackendFailure => "backend_failure",
            Termination::MalformedLimit => "malformed_limit",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub thought: String,
    pub action: String,
    pub observation: String,
}

/// The running context `c_t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentContext {
    /// Task statement, tool descriptions, and demonstrations.
    pub system: String,
    /// History rendering shown as the first user turn.
    pub initial_observation: String,
    pub steps: Vec<Step>,
    /// Policy completions so far.
    pub round: usize,
}

impl AgentContext {
    pub fn new(registry: &ToolRegistry, history: &[usize]) -> Self {
        let t = &registry.templates;
        Self {
            system: t.system_prompt(&registry.render_descriptions()),
            initial_observation: t.history_block(&registry.catalog, history, registry.history_window),
            steps: Vec::new(),
            round: 0,
        }
    }
}

/// System turn, the initial observation, then one assistant/user pair per step.
pub fn render_context(ctx: &AgentContext) -> Vec<ChatTurn> {
    let mut turns = vec![ChatTurn::system(ctx.system.clone()), ChatTurn::user(ctx.initial_observation.clone())];
    for s in &ctx.steps {
        turns.push(ChatTurn::assistant(format!("Thought: {}\nAction: {}", s.thought, s.action)));
        turns.push(ChatTurn::user(format!("Observation: {}", s.observation)));
    }
    turns
}

/// `label[ n]: rest`, case-insensitive.
fn labeled<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    let l = line.trim_start();
    if l.len() < label.len() || !l[..label.len()].eq_ignore_ascii_case(label) {
        return None;
    }
    let rest = l[label.len()..].trim_start_matches(|c: char| c.is_ascii_digit() || c == ' ');
    rest.strip_prefix(':').map(str::trim)
}

/// First Thought/Action pair of a completion plus the lines that follow the
/// action (used by `Finish` to list names).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extracted {
    pub thought: String,
    pub action: Option<String>,
    pub trailing: Vec<String>,
}

pub fn extract_step(completion: &str) -> Extracted {
    let mut thought: Vec<&str> = Vec::new();
    let mut seen_thought = false;
    let mut action = None;
    let mut trailing = Vec::new();
    for line in completion.lines() {
        if action.is_none() {
            if let Some(a) = labeled(line, "action") {
                action = Some(a.to_string());
            } else if let Some(t) = labeled(line, "thought") {
                if !seen_thought {
                    seen_thought = true;
                    thought.push(t);
                }
            } else if seen_thought && !line.trim().is_empty() {
                thought.push(line.trim());
            }
        } else {
            if ["thought", "action", "observation"].iter().any(|l| labeled(line, l).is_some()) {
                break;
            }
            if !line.trim().is_empty() {
                trailing.push(line.trim().to_string());
            }
        }
    }
    Extracted { thought: thought.join(" "), action, trailing }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub round: usize,
    pub thought: String,
    pub action: String,
    pub observation_digest: String,
    /// Ids of the list this step validated and stored.
    pub list: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default)]
    pub reruns: usize,
    #[serde(default)]
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub user: usize,
    pub target: usize,
    pub hit: bool,
    pub rounds: usize,
    pub termination: Termination,
    pub final_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceRecord {
    Step(StepRecord),
    Summary(EpisodeSummary),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub steps: Vec<StepRecord>,
    pub summary: Option<EpisodeSummary>,
}

impl Trace {
    /// One JSON object per line; the summary comes last.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        let recs = self.steps.iter().cloned().map(TraceRecord::Step).chain(self.summary.clone().map(TraceRecord::Summary));
        for r in recs {
            s.push_str(&serde_json::to_string(&r).expect("trace records serialize"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let mut t = Trace::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str(line)? {
                TraceRecord::Step(s) => t.steps.push(s),
                TraceRecord::Summary(s) => t.summary = Some(s),
            }
        }
        Ok(t)
    }
}

pub fn digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentResult {
    pub final_list: Vec<CandidateEntry>,
    pub termination: Termination,
    pub rounds: usize,
    pub trace: Trace,
    pub context: AgentContext,
    pub memory_dump: String,
}

impl AgentResult {
    pub fn final_ids(&self) -> Vec<usize> {
        self.final_list.iter().map(|e| e.item).collect()
    }
}

struct Outcome {
    observation: String,
    list: Vec<usize>,
    note: Option<String>,
    reruns: usize,
    fallback: bool,
}

impl Outcome {
    fn text(observation: String) -> Self {
        Self { observation, list: Vec::new(), note: None, reruns: 0, fallback: false }
    }
}

enum Dispatch {
    Observed(Outcome),
    BackendDown(String),
}

/// Runs one tool action against memory; `Finish` is handled by the caller.
fn dispatch(
    registry: &ToolRegistry,
    memory: &mut MemoryStore<'_>,
    history: &[usize],
    parsed: &ParsedAction,
    round: usize,
    backend: &dyn ChatBackend,
) -> Result<Dispatch, AgentError> {
    let a = &parsed.action;
    let result = match a.tool_type {
        ToolType::Retrieval => {
            let mut exclude: BTreeSet<usize> = history.iter().copied().collect();
            exclude.extend(memory.chronological().iter().map(|e| e.item));
            registry.run_retrieval(&a.attribute, history, a.k, round, &exclude).map(|l| (l, 0, false))
        }
        ToolType::Rank => registry.run_rank(history, memory, &a.attribute, a.k, round, backend).map(|o| (o.list, o.reruns, o.fallback)),
        ToolType::Finish => unreachable!("finish is handled by the episode loop"),
    };
    let mut out = match result {
        Ok((list, reruns, fallback)) => {
            let stored = memory.store(list);
            let mut o = Outcome::text(memory::render_observation(&registry.templates, stored));
            o.list = stored.ids();
            o.reruns = reruns;
            o.fallback = fallback;
            if fallback {
                o.note = Some("rank fallback: prior order".into());
            }
            o
        }
        Err(e) if e.is_observation() => Outcome::text(e.to_string()),
        Err(ToolError::Llm(LlmError::BackendUnavailable { attempts, reason })) => {
            return Ok(Dispatch::BackendDown(format!("{attempts} attempt(s): {reason}")))
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(orig) = parsed.clamped_from {
        out.observation.push_str(&format!(" (K={orig} is out of range; used {})", a.k));
        out.note.get_or_insert_with(|| format!("k clamped from {orig}"));
    }
    Ok(Dispatch::Observed(out))
}

fn assemble_excluding(memory: &MemoryStore<'_>, history: &HashSet<usize>, n: usize, order: AssemblyOrder) -> Vec<CandidateEntry> {
    memory.assemble(usize::MAX, order).into_iter().filter(|e| !history.contains(&e.item)).take(n).collect()
}

/// Names listed with `Finish` first (when they are stored candidates), then
/// the remaining candidates by round recency and confidence.
fn finish_list(memory: &MemoryStore<'_>, history: &HashSet<usize>, names: &[String], n: usize) -> Vec<CandidateEntry> {
    let valid = names.iter().filter_map(|l| resolve_line(memory.names, memory.catalog, l));
    let mut seen = HashSet::new();
    let mut out: Vec<CandidateEntry> = Vec::new();
    let pool = memory.assemble(usize::MAX, AssemblyOrder::RecencyConfidence);
    for item in valid {
        if history.contains(&item) || !seen.insert(item) {
            continue;
        }
        if let Some(e) = pool.iter().find(|e| e.item == item) {
            out.push(e.clone());
        }
    }
    for e in pool {
        if out.len() >= n {
            break;
        }
        if !history.contains(&e.item) && seen.insert(e.item) {
            out.push(e);
        }
    }
    out.truncate(n);
    out
}

fn finish_result(
    h: &UserHistory,
    ctx: AgentContext,
    mut trace: Trace,
    memory: &MemoryStore<'_>,
    final_list: Vec<CandidateEntry>,
    termination: Termination,
) -> AgentResult {
    let final_ids: Vec<usize> = final_list.iter().map(|e| e.item).collect();
    trace.summary = Some(EpisodeSummary {
        user: h.user_id,
        target: h.target,
        hit: final_ids.contains(&h.target),
        rounds: ctx.round,
        termination,
        final_ids,
    });
    AgentResult { final_list, termination, rounds: ctx.round, trace, context: ctx, memory_dump: memory.dump() }
}

/// Interactive episode for one user. The policy sees the user's history up to
/// (and including) the validation item; the target stays hidden.
pub fn run_episode(
    h: &UserHistory,
    registry: &ToolRegistry,
    backend: &dyn ChatBackend,
    cfg: &AgentConfig,
) -> Result<AgentResult, AgentError> {
    if registry.retrieval.is_empty() {
        return Err(AgentError::NoTools);
    }
    let history = h.test_input();
    let hist_set: HashSet<usize> = history.iter().copied().collect();
    let mut memory = registry.new_memory();
    let mut ctx = AgentContext::new(registry, &history);
    let mut trace = Trace::default();
    let mut malformed = 0;

    while ctx.round < cfg.max_rounds {
        let completion = match backend.complete(&render_context(&ctx)) {
            Ok(c) => c,
            Err(LlmError::BackendUnavailable { attempts, reason }) => {
                log::warn!("policy backend unavailable after {attempts} attempt(s): {reason}");
                let list = assemble_excluding(&memory, &hist_set, cfg.n, AssemblyOrder::RecentListFirst);
                return Ok(finish_result(h, ctx, trace, &memory, list, Termination::BackendFailure));
            }
            Err(e) => return Err(e.into()),
        };
        ctx.round += 1;
        let round = ctx.round;
        let ex = extract_step(&completion);
        let action_text = ex.action.clone().unwrap_or_default();
        let parsed = match ex.action.as_deref().map(parse_action) {
            Some(Ok(p)) => Ok(p),
            Some(Err(ActionError::UnknownTool { name, .. })) => Err(format!("{CORRECTIVE_OBSERVATION} (unknown tool '{name}')")),
            _ => Err(CORRECTIVE_OBSERVATION.to_string()),
        };
        let outcome = match parsed {
            Err(observation) => {
                malformed += 1;
                if malformed > cfg.malformed_budget {
                    trace.steps.push(StepRecord {
                        round,
                        thought: ex.thought,
                        action: action_text,
                        observation_digest: String::new(),
                        list: Vec::new(),
                        note: Some("malformed action budget exhausted".into()),
                        reruns: 0,
                        fallback: false,
                    });
                    let list = assemble_excluding(&memory, &hist_set, cfg.n, AssemblyOrder::RecentListFirst);
                    return Ok(finish_result(h, ctx, trace, &memory, list, Termination::MalformedLimit));
                }
                let mut o = Outcome::text(observation);
                o.note = Some("malformed action".into());
                o
            }
            Ok(p) if p.action.tool_type == ToolType::Finish => {
                let n = p.action.k.min(cfg.n);
                let list = finish_list(&memory, &hist_set, &parse_list_reply(&ex.trailing.join("\n")), n);
                trace.steps.push(StepRecord {
                    round,
                    thought: ex.thought.clone(),
                    action: action_text.clone(),
                    observation_digest: String::new(),
                    list: list.iter().map(|e| e.item).collect(),
                    note: None,
                    reruns: 0,
                    fallback: false,
                });
                ctx.steps.push(Step { thought: ex.thought, action: action_text, observation: String::new() });
                return Ok(finish_result(h, ctx, trace, &memory, list, Termination::Finish));
            }
            Ok(p) => match dispatch(registry, &mut memory, &history, &p, round, backend)? {
                Dispatch::Observed(o) => o,
                Dispatch::BackendDown(reason) => {
                    log::warn!("rank backend unavailable: {reason}");
                    let list = assemble_excluding(&memory, &hist_set, cfg.n, AssemblyOrder::RecentListFirst);
                    return Ok(finish_result(h, ctx, trace, &memory, list, Termination::BackendFailure));
                }
            },
        };
        trace.steps.push(StepRecord {
            round,
            thought: ex.thought.clone(),
            action: action_text.clone(),
            observation_digest: digest(&outcome.observation),
            list: outcome.list,
            note: outcome.note,
            reruns: outcome.reruns,
            fallback: outcome.fallback,
        });
        ctx.steps.push(Step { thought: ex.thought, action: action_text, observation: outcome.observation });
    }
    let list = assemble_excluding(&memory, &hist_set, cfg.n, AssemblyOrder::RecentListFirst);
    Ok(finish_result(h, ctx, trace, &memory, list, Termination::RoundCap))
}

/// Strips list markers and an `Action:` label from a plan line.
fn plan_line(line: &str) -> &str {
    let mut l = line.trim();
    let digits = l.len() - l.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        let r = &l[digits..];
        if let Some(r) = r.strip_prefix('.').or_else(|| r.strip_prefix(')')) {
            l = r.trim();
        }
    }
    l = l.trim_start_matches(['-', '*']).trim();
    labeled(l, "action").or_else(|| labeled(l, "step")).unwrap_or(l)
}

/// Plan-then-execute variant: one completion yields every action, which then
/// run in order without feedback. At most `max_rounds` actions are executed.
pub fn run_plan_mode(
    h: &UserHistory,
    registry: &ToolRegistry,
    backend: &dyn ChatBackend,
    cfg: &AgentConfig,
) -> Result<AgentResult, AgentError> {
    if registry.retrieval.is_empty() {
        return Err(AgentError::NoTools);
    }
    let history = h.test_input();
    let hist_set: HashSet<usize> = history.iter().copied().collect();
    let mut memory = registry.new_memory();
    let mut ctx = AgentContext::new(registry, &history);
    ctx.initial_observation = format!("{}\n\n{}", ctx.initial_observation, registry.templates.plan_prompt(cfg.n));
    let mut trace = Trace::default();
    let plan = match backend.complete(&render_context(&ctx)) {
        Ok(p) => p,
        Err(LlmError::BackendUnavailable { .. }) => {
            return Ok(finish_result(h, ctx, trace, &memory, Vec::new(), Termination::BackendFailure));
        }
        Err(e) => return Err(e.into()),
    };
    ctx.round = 1;
    let mut executed = 0;
    let mut finish_n = None;
    let note = |action: &str, note: String| StepRecord {
        round: 1,
        thought: String::new(),
        action: action.to_string(),
        observation_digest: String::new(),
        list: Vec::new(),
        note: Some(note),
        reruns: 0,
        fallback: false,
    };
    for raw in plan.lines() {
        let line = plan_line(raw);
        if line.is_empty() {
            continue;
        }
        if executed >= cfg.max_rounds {
            trace.steps.push(note(line, "skipped: plan longer than the round cap".into()));
            continue;
        }
        let parsed = match parse_action(line) {
            Ok(p) => p,
            Err(ActionError::UnknownTool { name, .. }) => {
                trace.steps.push(note(line, format!("error: unknown tool '{name}'")));
                continue;
            }
            Err(ActionError::Malformed(_)) => {
                trace.steps.push(note(line, "skipped: unparseable plan line".into()));
                continue;
            }
        };
        executed += 1;
        if parsed.action.tool_type == ToolType::Finish {
            finish_n = Some(parsed.action.k);
            trace.steps.push(StepRecord { note: None, ..note(line, String::new()) });
            break;
        }
        match dispatch(registry, &mut memory, &history, &parsed, executed, backend)? {
            Dispatch::Observed(o) => {
                trace.steps.push(StepRecord {
                    round: 1,
                    thought: String::new(),
                    action: line.to_string(),
                    observation_digest: digest(&o.observation),
                    list: o.list,
                    note: o.note,
                    reruns: o.reruns,
                    fallback: o.fallback,
                });
                ctx.steps.push(Step { thought: String::new(), action: line.to_string(), observation: o.observation });
            }
            Dispatch::BackendDown(_) => {
                let list = assemble_excluding(&memory, &hist_set, cfg.n, AssemblyOrder::RecentListFirst);
                return Ok(finish_result(h, ctx, trace, &memory, list, Termination::BackendFailure));
            }
        }
    }
    let (n, termination) = match finish_n {
        Some(k) => (k.min(cfg.n), Termination::Finish),
        None => (cfg.n, Termination::RoundCap),
    };
    let list = assemble_excluding(&memory, &hist_set, n, AssemblyOrder::RecencyConfidence);
    Ok(finish_result(h, ctx, trace, &memory, list, termination))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_first_pair_and_trailing_names() {
        let e = extract_step("Thought: a\nmore\nAction: Finish[3]\n1. X\n2. Y\nThought: again\nAction: Rank[a, 2]");
        assert_eq!(e.thought, "a more");
        assert_eq!(e.action.as_deref(), Some("Finish[3]"));
        assert_eq!(e.trailing, vec!["1. X", "2. Y"]);
        let e = extract_step("thought 2: b\nACTION 2: Retrieval[genre, 5]\nObservation: fake");
        assert_eq!((e.thought.as_str(), e.action.as_deref()), ("b", Some("Retrieval[genre, 5]")));
        assert!(e.trailing.is_empty());
        assert_eq!(extract_step("no labels").action, None);
    }

    #[test]
    fn plan_lines() {
        assert_eq!(plan_line("1. Retrieval[genre, 5]"), "Retrieval[genre, 5]");
        assert_eq!(plan_line("Action 2: Rank[actor, 4]"), "Rank[actor, 4]");
        assert_eq!(plan_line("- Finish"), "Finish");
    }

    #[test]
    fn trace_round_trips_through_jsonl() {
        let t = Trace {
            steps: vec![StepRecord {
                round: 1,
                thought: "t".into(),
                action: "Retrieval[genre, 5]".into(),
                observation_digest: digest("o"),
                list: vec![3, 1],
                note: None,
                reruns: 0,
                fallback: false,
            }],
            summary: Some(EpisodeSummary { user: 0, target: 4, hit: false, rounds: 1, termination: Termination::RoundCap, final_ids: vec![3, 1] }),
        };
        let text = t.to_jsonl();
        assert!(text.lines().last().unwrap().contains("\"termination\":\"round_cap\""));
        assert_eq!(Trace::from_jsonl(&text).unwrap(), t);
    }
}
