//! Tool actions, prompt templates, and the tool registry exposed to the agent.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::attrtool::{load_attr_checkpoint, AttrToolError, RetrievalTool};
use crate::checkpoint::Checkpoint;
use crate::corpus::{normalize_attribute_value, ItemCatalog};
use crate::llm::{ChatBackend, ChatTurn, LlmError};
use crate::memory::{MemoryStore, NameIndex, RerunPrompt};
use crate::seqrec::BackboneParams;

pub const K_MAX: usize = 20;
pub const DEFAULT_K: usize = 10;
pub const MAX_RETRIES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ToolType {
    Retrieval,
    Rank,
    Finish,
}

impl fmt::Display for ToolType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToolType::Retrieval => "Retrieval",
            ToolType::Rank => "Rank",
            ToolType::Finish => "Finish",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolAction {
    pub tool_type: ToolType,
    /// Empty for `Finish`.
    pub attribute: String,
    /// Tool output size, or the final list length for `Finish`.
    pub k: usize,
}

impl ToolAction {
    pub fn retrieval(attribute: &str, k: usize) -> Self {
        Self { tool_type: ToolType::Retrieval, attribute: attribute.into(), k }
    }

    pub fn rank(attribute: &str, k: usize) -> Self {
        Self { tool_type: ToolType::Rank, attribute: attribute.into(), k }
    }

    pub fn finish(k: usize) -> Self {
        Self { tool_type: ToolType::Finish, attribute: String::new(), k }
    }
}

impl fmt::Display for ToolAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tool_type {
            ToolType::Finish => write!(f, "Finish[{}]", self.k),
            t => write!(f, "{t}[{}, {}]", self.attribute, self.k),
        }
    }
}

pub fn render_action(a: &ToolAction) -> String {
    a.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActionError {
    #[error("malformed action `{0}`")]
    Malformed(String),
    #[error("unknown tool `{name}`")]
    UnknownTool { name: String, raw: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedAction {
    pub action: ToolAction,
    /// Original `k` when it was clamped into `1..=K_MAX`.
    pub clamped_from: Option<i64>,
}

/// Parses `Ident '[' attr (',' int)? ']'`, case-insensitive on the tool type.
/// `Finish` also takes `Finish[k]`, `Finish[]`, or bare `Finish`.
pub fn parse_action(raw: &str) -> Result<ParsedAction, ActionError> {
    let malformed = || ActionError::Malformed(raw.to_string());
    let s = raw.trim().trim_end_matches('.').trim_end();
    let ident_end = s.find(|c: char| !c.is_ascii_alphabetic()).unwrap_or(s.len());
    let ident = &s[..ident_end];
    if ident.is_empty() {
        return Err(malformed());
    }
    let tool_type = match ident.to_ascii_lowercase().as_str() {
        "retrieval" => ToolType::Retrieval,
        "rank" => ToolType::Rank,
        "finish" => ToolType::Finish,
        _ => {
            let rest = s[ident_end..].trim_start();
            return Err(if rest.starts_with('[') {
                ActionError::UnknownTool { name: ident.to_string(), raw: raw.to_string() }
            } else {
                malformed()
            });
        }
    };
    let rest = s[ident_end..].trim();
    let inner = if rest.is_empty() {
        if tool_type != ToolType::Finish {
            return Err(malformed());
        }
        ""
    } else {
        rest.strip_prefix('[').and_then(|r| r.strip_suffix(']')).ok_or_else(malformed)?.trim()
    };
    if inner.contains('[') || inner.contains(']') {
        return Err(malformed());
    }
    let parse_k = |t: &str| -> Result<(usize, Option<i64>), ActionError> {
        let v: i64 = t.trim().parse().map_err(|_| malformed())?;
        let c = v.clamp(1, K_MAX as i64);
        Ok((c as usize, (c != v).then_some(v)))
    };
    let (attribute, (k, clamped_from)) = match tool_type {
        ToolType::Finish => {
            let k = if inner.is_empty() { (DEFAULT_K, None) } else { parse_k(inner)? };
            (String::new(), k)
        }
        _ => {
            let (attr, k) = match inner.rsplit_once(',') {
                Some((a, k)) => (a.trim(), parse_k(k)?),
                None => (inner, (DEFAULT_K, None)),
            };
            if attr.is_empty() || attr.contains(',') {
                return Err(malformed());
            }
            (normalize_attribute_name(attr), k)
        }
    };
    Ok(ParsedAction { action: ToolAction { tool_type, attribute, k }, clamped_from })
}

/// Casefolded attribute name with internal spaces joined by `_`.
pub fn normalize_attribute_name(s: &str) -> String {
    normalize_attribute_value(s).split_whitespace().collect::<Vec<_>>().join("_")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolMark {
    pub tool_type: ToolType,
    pub attribute: String,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateEntry {
    pub item: usize,
    pub name: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateList {
    pub entries: Vec<CandidateEntry>,
    pub mark: ToolMark,
}

impl CandidateList {
    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.item).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolDescription {
    pub name: String,
    pub tool_type: ToolType,
    pub usage: String,
    pub vocabulary: Vec<String>,
}

/// Item wording used by the prompts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Domain {
    pub noun: String,
    pub nouns: String,
    pub verb: String,
    pub verb_past: String,
}

impl Domain {
    pub fn new(noun: &str, nouns: &str, verb: &str, verb_past: &str) -> Self {
        Self { noun: noun.into(), nouns: nouns.into(), verb: verb.into(), verb_past: verb_past.into() }
    }

    pub fn movies() -> Self {
        Self::new("movie", "movies", "watch", "watched")
    }

    /// Guesses wording from a dataset name.
    pub fn for_dataset(name: &str) -> Self {
        let n = name.to_ascii_lowercase();
        if n.contains("book") {
            Self::new("book", "books", "read", "read")
        } else if n.contains("yelp") {
            Self::new("business", "businesses", "visit", "visited")
        } else if n.contains("ml") || n.contains("movie") || n.contains("synth") {
            Self::movies()
        } else {
            Self::new("item", "items", "choose", "chose")
        }
    }
}

impl Default for Domain {
    fn default() -> Self {
        Self::movies()
    }
}

/// Replaces `{name}` placeholders in one pass; unknown placeholders and
/// braces inside substituted values are left untouched.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if after[..close].chars().all(|c| c.is_ascii_alphanumeric() || c == '_') => {
                let key = &after[..close];
                match vars.iter().find(|(k, _)| *k == key) {
                    Some((_, v)) => out.push_str(v),
                    None => out.push_str(&rest[open..open + close + 2]),
                }
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

pub const TEMPLATE_FILES: [&str; 8] = [
    "system.txt",
    "demonstrations.txt",
    "history.txt",
    "rank.txt",
    "rank_system.txt",
    "memory_observation.txt",
    "rerun.txt",
    "plan.txt",
];

/// Prompt templates. Defaults are compiled in from `templates/`; any file of
/// the same name in an override directory replaces the default.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub system: String,
    pub demonstrations: String,
    pub history: String,
    pub rank: String,
    pub rank_system: String,
    pub memory_observation: String,
    pub rerun: String,
    pub plan: String,
    pub domain: Domain,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            system: include_str!("../templates/system.txt").into(),
            demonstrations: include_str!("../templates/demonstrations.txt").into(),
            history: include_str!("../templates/history.txt").into(),
            rank: include_str!("../templates/rank.txt").into(),
            rank_system: include_str!("../templates/rank_system.txt").into(),
            memory_observation: include_str!("../templates/memory_observation.txt").into(),
            rerun: include_str!("../templates/rerun.txt").into(),
            plan: include_str!("../templates/plan.txt").into(),
            domain: Domain::default(),
        }
    }
}

impl Templates {
    pub fn with_domain(domain: Domain) -> Self {
        Self { domain, ..Self::default() }
    }

    pub fn load_dir(dir: &Path, domain: Domain) -> std::io::Result<Self> {
        let mut t = Self::with_domain(domain);
        for name in TEMPLATE_FILES {
            let p = dir.join(name);
            if p.exists() {
                let text = fs::read_to_string(&p)?;
                let slot = match name {
                    "system.txt" => &mut t.system,
                    "demonstrations.txt" => &mut t.demonstrations,
                    "history.txt" => &mut t.history,
                    "rank.txt" => &mut t.rank,
                    "rank_system.txt" => &mut t.rank_system,
                    "memory_observation.txt" => &mut t.memory_observation,
                    "rerun.txt" => &mut t.rerun,
                    _ => &mut t.plan,
                };
                *slot = text;
            }
        }
        Ok(t)
    }

    fn domain_vars(&self) -> [(&str, &str); 4] {
        [
            ("noun", self.domain.noun.as_str()),
            ("nouns", self.domain.nouns.as_str()),
            ("verb", self.domain.verb.as_str()),
            ("verb_past", self.domain.verb_past.as_str()),
        ]
    }

    fn render(&self, template: &str, extra: &[(&str, &str)]) -> String {
        let mut vars = self.domain_vars().to_vec();
        vars.extend_from_slice(extra);
        fill(template, &vars).trim_end().to_string()
    }

    pub fn history_block(&self, catalog: &ItemCatalog, history: &[usize], window: usize) -> String {
        let shown = &history[history.len().saturating_sub(window)..];
        let items: Vec<String> = shown.iter().map(|&i| catalog.name(i).to_string()).collect();
        self.render(&self.history, &[("items", &items.join("\n"))])
    }

    pub fn system_prompt(&self, tools: &str) -> String {
        let demos = self.render(&self.demonstrations, &[]);
        self.render(&self.system, &[("tools", tools), ("demonstrations", &demos)])
    }

    pub fn rank_prompt(&self, history: &str, candidates: &str, attribute: &str, k: usize) -> String {
        self.render(&self.rank, &[("history", history), ("candidates", candidates), ("attribute", attribute), ("k", &k.to_string())])
    }

    pub fn rank_system_prompt(&self) -> String {
        self.render(&self.rank_system, &[])
    }

    pub fn memory_observation(&self, attribute: &str, k: usize, candidates: &str) -> String {
        self.render(&self.memory_observation, &[("attribute", attribute), ("k", &k.to_string()), ("candidates", candidates)])
    }

    pub fn rerun(&self, invalid: &[String]) -> String {
        let quoted: Vec<String> = invalid.iter().map(|s| format!("\"{s}\"")).collect();
        self.render(&self.rerun, &[("invalid", &quoted.join(", "))])
    }

    pub fn plan_prompt(&self, n: usize) -> String {
        self.render(&self.plan, &[("n", &n.to_string())])
    }
}

#[derive(Debug, Error)]
pub enum ToolError {
    #[error("Unknown attribute '{name}'; available: {}", available.join(", "))]
    UnknownAttribute { name: String, available: Vec<String> },
    #[error("Rank needs candidates from an earlier Retrieval call")]
    NoPriorCandidates,
    #[error("retrieval tool for `{0}` is registered twice")]
    Duplicate(String),
    #[error(transparent)]
    AttrTool(#[from] AttrToolError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ToolError {
    /// Whether the agent should report this back as an observation rather
    /// than abort the episode.
    pub fn is_observation(&self) -> bool {
        matches!(self, ToolError::UnknownAttribute { .. } | ToolError::NoPriorCandidates)
    }
}

/// Result of one rank-tool call.
#[derive(Debug, Clone, PartialEq)]
pub struct RankOutcome {
    pub list: CandidateList,
    pub reruns: usize,
    /// True when every attempt was rejected and prior order was used.
    pub fallback: bool,
    pub prompts: Vec<String>,
}

/// Immutable set of tools for one catalog.
pub struct ToolRegistry {
    pub catalog: Arc<ItemCatalog>,
    pub names: Arc<NameIndex>,
    pub backbone: Arc<BackboneParams>,
    pub retrieval: Vec<RetrievalTool>,
    pub templates: Templates,
    pub k_max: usize,
    pub max_retries: usize,
    pub history_window: usize,
}

impl ToolRegistry {
    pub fn new(
        catalog: Arc<ItemCatalog>,
        backbone: Arc<BackboneParams>,
        retrieval: Vec<RetrievalTool>,
        templates: Templates,
    ) -> Result<Self, ToolError> {
        let mut seen = HashSet::new();
        for t in &retrieval {
            if !catalog.has_attribute(t.attribute()) {
                return Err(ToolError::UnknownAttribute { name: t.attribute().into(), available: catalog_attrs(&catalog) });
            }
            if !seen.insert(t.attribute().to_string()) {
                return Err(ToolError::Duplicate(t.attribute().into()));
            }
        }
        Ok(Self {
            names: Arc::new(NameIndex::new(&catalog)),
            catalog,
            backbone,
            retrieval,
            templates,
            k_max: K_MAX,
            max_retries: MAX_RETRIES,
            history_window: 20,
        })
    }

    /// Loads every `*.attr` checkpoint in `dir`, sorted by file name.
    pub fn load_dir(
        catalog: Arc<ItemCatalog>,
        backbone: Arc<BackboneParams>,
        dir: &Path,
        templates: Templates,
    ) -> Result<Self, ToolError> {
        let entries = fs::read_dir(dir).map_err(|source| ToolError::Io { path: dir.into(), source })?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "attr"))
            .collect();
        paths.sort();
        let mut tools = Vec::new();
        for p in paths {
            let c = Checkpoint::read(&p).map_err(AttrToolError::from)?;
            let (enc, _) = load_attr_checkpoint(&c)?;
            tools.push(RetrievalTool::new(enc, backbone.clone(), Some(p)));
        }
        Self::new(catalog, backbone, tools, templates)
    }

    pub fn new_memory(&self) -> MemoryStore<'_> {
        MemoryStore::new(&self.catalog, &self.names)
    }

    pub fn attributes(&self) -> Vec<String> {
        self.retrieval.iter().map(|t| t.attribute().to_string()).collect()
    }

    pub fn find_retrieval(&self, attribute: &str) -> Option<&RetrievalTool> {
        let a = normalize_attribute_name(attribute);
        self.retrieval.iter().find(|t| normalize_attribute_name(t.attribute()) == a)
    }

    pub fn descriptions(&self) -> Vec<ToolDescription> {
        let d = &self.templates.domain;
        let mut out: Vec<ToolDescription> = self
            .retrieval
            .iter()
            .map(|t| ToolDescription {
                name: format!("Retrieval[{}, K]", t.attribute()),
                tool_type: ToolType::Retrieval,
                usage: format!(
                    "returns K {} that fit the user's history and preferred {}{}.",
                    d.nouns,
                    t.attribute(),
                    preview(&t.spec.vocabulary)
                ),
                vocabulary: t.spec.vocabulary.clone(),
            })
            .collect();
        out.push(ToolDescription {
            name: "Rank[attribute, K]".into(),
            tool_type: ToolType::Rank,
            usage: format!(
                "re-ranks the {} retrieved so far by how likely the user is to {} them given the named attribute (any attribute, e.g. actor), and returns the top K.",
                d.nouns, d.verb
            ),
            vocabulary: Vec::new(),
        });
        out.push(ToolDescription {
            name: "Finish[N]".into(),
            tool_type: ToolType::Finish,
            usage: format!(
                "ends the session and returns N {}. You may list the chosen {} names on the lines after the action.",
                d.nouns, d.noun
            ),
            vocabulary: Vec::new(),
        });
        out
    }

    /// Numbered tool list for the system prompt.
    pub fn render_descriptions(&self) -> String {
        self.descriptions()
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{}. {}: {}", i + 1, t.name, t.usage))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn clamp_k(&self, k: usize) -> usize {
        k.clamp(1, self.k_max)
    }

    /// Attribute-conditioned top-`k` retrieval, excluding `exclude`.
    pub fn run_retrieval(
        &self,
        attribute: &str,
        history: &[usize],
        k: usize,
        round: usize,
        exclude: &BTreeSet<usize>,
    ) -> Result<CandidateList, ToolError> {
        let tool = self.find_retrieval(attribute).ok_or_else(|| ToolError::UnknownAttribute {
            name: attribute.into(),
            available: self.attributes(),
        })?;
        let k = self.clamp_k(k);
        let got = tool.retrieve(&self.catalog, history, k, self.k_max, exclude)?;
        Ok(CandidateList {
            entries: got
                .into_iter()
                .map(|r| CandidateEntry { item: r.item, name: r.name, confidence: round4(r.score as f64) })
                .collect(),
            mark: ToolMark { tool_type: ToolType::Retrieval, attribute: tool.attribute().into(), round },
        })
    }

    /// LLM re-ranking of the candidates already in `memory`. Replies naming
    /// anything outside the prior set trigger re-runs with the offending names
    /// attached; after `max_retries` re-runs the prior order is used.
    pub fn run_rank(
        &self,
        history: &[usize],
        memory: &mut MemoryStore<'_>,
        attribute: &str,
        k: usize,
        round: usize,
        backend: &dyn ChatBackend,
    ) -> Result<RankOutcome, ToolError> {
        let hist: HashSet<usize> = history.iter().copied().collect();
        let prior: Vec<CandidateEntry> = memory.chronological().into_iter().filter(|e| !hist.contains(&e.item)).collect();
        if prior.is_empty() {
            return Err(ToolError::NoPriorCandidates);
        }
        let prior_ids: HashSet<usize> = prior.iter().map(|e| e.item).collect();
        let k = self.clamp_k(k);
        let out_len = k.min(prior.len());
        let attribute = normalize_attribute_name(attribute);
        let candidates_block = prior.iter().map(|e| format!("{} | {}", e.item, e.name)).collect::<Vec<_>>().join("\n");
        let base = self.templates.rank_prompt(
            &self.templates.history_block(&self.catalog, history, self.history_window),
            &candidates_block,
            &attribute.replace('_', " "),
            out_len,
        );
        let system = self.templates.rank_system_prompt();
        let mut prompt = RerunPrompt::new(base);
        let mut prompts = Vec::new();
        let mark = ToolMark { tool_type: ToolType::Rank, attribute: attribute.clone(), round };

        for attempt in 0..=self.max_retries {
            let text = prompt.render(&self.templates);
            prompts.push(text.clone());
            let reply = backend.complete(&[ChatTurn::system(system.clone()), ChatTurn::user(text)])?;
            let mut chosen: Vec<usize> = Vec::new();
            let mut invalid = Vec::new();
            for line in parse_list_reply(&reply) {
                match resolve_line(&self.names, &self.catalog, &line) {
                    Some(i) if prior_ids.contains(&i) => {
                        if !chosen.contains(&i) {
                            chosen.push(i);
                        }
                    }
                    _ => invalid.push(line),
                }
            }
            if invalid.is_empty() {
                for e in &prior {
                    if chosen.len() >= out_len {
                        break;
                    }
                    if !chosen.contains(&e.item) {
                        chosen.push(e.item);
                    }
                }
                chosen.truncate(out_len);
                return Ok(RankOutcome { list: self.rank_list(&chosen, mark), reruns: attempt, fallback: false, prompts });
            }
            memory.record_rejection(round, invalid.clone(), attempt);
            if attempt < self.max_retries {
                prompt.push(invalid);
            }
        }
        log::warn!("rank tool fell back to prior order after {} re-runs", self.max_retries);
        let ids: Vec<usize> = prior.iter().take(out_len).map(|e| e.item).collect();
        Ok(RankOutcome { list: self.rank_list(&ids, mark), reruns: self.max_retries, fallback: true, prompts })
    }

    fn rank_list(&self, ids: &[usize], mark: ToolMark) -> CandidateList {
        CandidateList {
            entries: ids
                .iter()
                .enumerate()
                .map(|(pos, &i)| CandidateEntry { item: i, name: self.catalog.name(i).into(), confidence: 1.0 / (pos as f64 + 1.0) })
                .collect(),
            mark,
        }
    }
}

fn catalog_attrs(c: &ItemCatalog) -> Vec<String> {
    c.attribute_names().iter().map(|s| s.to_string()).collect()
}

fn preview(vocab: &[String]) -> String {
    if vocab.is_empty() {
        return String::new();
    }
    let shown: Vec<&str> = vocab.iter().take(6).map(String::as_str).collect();
    format!(" (values such as {})", shown.join(", "))
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// Strips a leading list marker (`1.`, `2)`, `3:`, `-`, `*`).
fn strip_marker(line: &str) -> Option<&str> {
    let l = line.trim_start();
    if let Some(r) = l.strip_prefix('-').or_else(|| l.strip_prefix('*')) {
        return Some(r.trim());
    }
    let digits = l.len() - l.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        let r = &l[digits..];
        if let Some(r) = r.strip_prefix('.').or_else(|| r.strip_prefix(')')).or_else(|| r.strip_prefix(':')) {
            return Some(r.trim());
        }
    }
    None
}

/// Entries of a list reply. When any line carries a list marker, only marked
/// lines count; otherwise every non-empty line does.
pub fn parse_list_reply(reply: &str) -> Vec<String> {
    let lines: Vec<&str> = reply.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let marked: Vec<&str> = lines.iter().filter_map(|l| strip_marker(l)).collect();
    let picked = if marked.is_empty() { lines } else { marked };
    picked
        .into_iter()
        .map(|l| l.trim_matches(|c| c == '"' || c == '*' || c == '`').trim().to_string())
        .filter(|l| !l.is_empty())
        .collect()
}

/// Resolves one reply line, trying `id | name | ...` fields and then the text
/// before a trailing explanation.
pub fn resolve_line(names: &NameIndex, catalog: &ItemCatalog, line: &str) -> Option<usize> {
    if line.contains('|') {
        let fields: Vec<&str> = line.split('|').map(str::trim).collect();
        if let Some(i) = names.resolve(catalog, fields[0]) {
            return Some(i);
        }
        return fields.get(1).and_then(|n| names.resolve(catalog, n));
    }
    if let Some(i) = names.resolve(catalog, line) {
        return Some(i);
    }
    [" - ", " \u{2013} ", ": "]
        .iter()
        .find_map(|sep| line.split_once(sep).and_then(|(head, _)| names.resolve(catalog, head)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grammar_examples() {
        assert_eq!(parse_action("Retrieval[genre, 5]").unwrap().action, ToolAction::retrieval("genre", 5));
        assert_eq!(parse_action("Rank[actor, 4]").unwrap().action, ToolAction::rank("actor", 4));
        assert_eq!(parse_action("Finish").unwrap().action, ToolAction::finish(10));
        assert_eq!(parse_action("finish[7]").unwrap().action, ToolAction::finish(7));
        assert_eq!(parse_action("  RETRIEVAL [ Release Year ,3 ] ").unwrap().action, ToolAction::retrieval("release_year", 3));
        assert_eq!(parse_action("Retrieval[genre]").unwrap().action, ToolAction::retrieval("genre", 10));
    }

    #[test]
    fn grammar_errors_and_clamping() {
        assert!(matches!(parse_action("Retrieval genre 5"), Err(ActionError::Malformed(_))));
        assert!(matches!(parse_action("Retrieval[, 5]"), Err(ActionError::Malformed(_))));
        assert!(matches!(parse_action("Retrieval[genre, five]"), Err(ActionError::Malformed(_))));
        assert!(matches!(parse_action(""), Err(ActionError::Malformed(_))));
        assert!(matches!(parse_action("Search[web, 3]"), Err(ActionError::UnknownTool { .. })));
        let p = parse_action("Retrieval[genre, 50]").unwrap();
        assert_eq!((p.action.k, p.clamped_from), (K_MAX, Some(50)));
        let p = parse_action("Rank[actor, 0]").unwrap();
        assert_eq!((p.action.k, p.clamped_from), (1, Some(0)));
    }

    fn action() -> impl Strategy<Value = ToolAction> {
        prop_oneof![
            ("[a-z][a-z_]{0,11}", 1usize..=K_MAX).prop_map(|(a, k)| ToolAction::retrieval(&a, k)),
            ("[a-z][a-z_]{0,11}", 1usize..=K_MAX).prop_map(|(a, k)| ToolAction::rank(&a, k)),
            (1usize..=K_MAX).prop_map(ToolAction::finish),
        ]
    }

    proptest! {
        #[test]
        fn parse_inverts_render(a in action()) {
            let back = parse_action(&render_action(&a)).unwrap();
            prop_assert_eq!(back.action, a);
            prop_assert_eq!(back.clamped_from, None);
        }
    }

    #[test]
    fn fill_is_single_pass() {
        assert_eq!(fill("a {x} {y} {z}", &[("x", "{y}"), ("y", "2")]), "a {y} 2 {z}");
        assert_eq!(fill("{ not a key }", &[]), "{ not a key }");
    }

    #[test]
    fn default_rank_template_renders() {
        let t = Templates::default();
        let p = t.rank_prompt("H", "C", "actor", 4);
        assert_eq!(
            p,
            "H\nC\nPlease rank the above recommended movies by measuring the possibilities that the user would like to watch next most according to the movie actor attribute and the given movie history records, and output top 4 movies except user's historical movies."
        );
        let b = Templates::with_domain(Domain::for_dataset("amazon-book"));
        assert!(b.rank_prompt("H", "C", "author", 3).contains("output top 3 books except user's historical books"));
    }

    #[test]
    fn list_reply_parsing() {
        let r = "Here is my ranking:\n1. The Matrix (1999)\n2) Heat - great cast\n\n- 12 | Alien | 0.5\n";
        assert_eq!(parse_list_reply(r), vec!["The Matrix (1999)", "Heat - great cast", "12 | Alien | 0.5"]);
        assert_eq!(parse_list_reply("A\nB"), vec!["A", "B"]);
    }
}
