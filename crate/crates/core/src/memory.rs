//! Catalog-grounded validation and tool-marked storage of candidate lists.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use crate::corpus::ItemCatalog;
use crate::tools::{CandidateEntry, CandidateList, Templates};

/// Casefold, drop a trailing `(year)`, strip punctuation, drop the articles
/// "the", "a", "an", and collapse whitespace.
pub fn normalize_name(name: &str) -> String {
    normalize(name, false)
}

/// Like [`normalize_name`] but keeps the year, so that same-titled items
/// from different years remain distinguishable.
pub fn normalize_name_with_year(name: &str) -> String {
    normalize(name, true)
}

fn normalize(name: &str, keep_year: bool) -> String {
    let mut s = name.trim().to_lowercase();
    if !keep_year {
        if let Some(open) = s.rfind('(') {
            let tail = s[open + 1..].trim_end();
            if let Some(year) = tail.strip_suffix(')') {
                if year.len() == 4 && year.chars().all(|c| c.is_ascii_digit()) {
                    s.truncate(open);
                }
            }
        }
    }
    let cleaned: String = s
        .chars()
        .filter(|c| *c != '\'' && *c != '\u{2019}')
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "the" | "a" | "an"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Minimum normalized length for prefix resolution.
pub const MIN_PREFIX_LEN: usize = 3;

/// Lookup tables over catalog names, built once per catalog.
#[derive(Debug, Clone, Default)]
pub struct NameIndex {
    with_year: BTreeMap<String, Vec<usize>>,
    without_year: BTreeMap<String, Vec<usize>>,
}

impl NameIndex {
    pub fn new(catalog: &ItemCatalog) -> Self {
        let mut idx = Self::default();
        for item in 0..catalog.len() {
            let name = catalog.name(item);
            idx.with_year.entry(normalize_name_with_year(name)).or_default().push(item);
            idx.without_year.entry(normalize_name(name)).or_default().push(item);
        }
        idx
    }

    /// Resolves a free-text reference: exact id, then exact normalized name
    /// (with year, then without), then unique prefix. Ambiguity is `None`.
    pub fn resolve(&self, catalog: &ItemCatalog, raw: &str) -> Option<usize> {
        let raw = raw.trim();
        if !raw.is_empty() && raw.chars().all(|c| c.is_ascii_digit()) {
            return raw.parse::<usize>().ok().filter(|&id| id < catalog.len());
        }
        let unique = |v: &Vec<usize>| if v.len() == 1 { Some(v[0]) } else { None };
        let wy = normalize_name_with_year(raw);
        if let Some(v) = self.with_year.get(&wy) {
            return unique(v);
        }
        let key = normalize_name(raw);
        if let Some(v) = self.without_year.get(&key) {
            return unique(v);
        }
        if key.chars().count() < MIN_PREFIX_LEN {
            return None;
        }
        let mut found = None;
        for (name, items) in self.without_year.range(key.clone()..) {
            if !name.starts_with(&key) {
                break;
            }
            for &i in items {
                match found {
                    None => found = Some(i),
                    Some(f) if f != i => return None,
                    _ => {}
                }
            }
        }
        found
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub round: usize,
    pub invalid: Vec<String>,
    pub retry: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssemblyOrder {
    /// Latest round first; within a round, higher confidence first.
    RecencyConfidence,
    /// Most recent list first in its own order, then earlier lists.
    RecentListFirst,
}

/// One episode's memory: the validated candidate lists and rejection log.
pub struct MemoryStore<'a> {
    pub catalog: &'a ItemCatalog,
    pub names: &'a NameIndex,
    lists: Vec<CandidateList>,
    rejections: Vec<Rejection>,
}

/// A resolved reference with its canonical catalog name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolved {
    pub item: usize,
    pub name: String,
}

impl<'a> MemoryStore<'a> {
    pub fn new(catalog: &'a ItemCatalog, names: &'a NameIndex) -> Self {
        Self { catalog, names, lists: Vec::new(), rejections: Vec::new() }
    }

    /// Splits raw references into resolved items and unresolved text.
    pub fn validate(&self, raw: &[String]) -> (Vec<Resolved>, Vec<String>) {
        let mut valid = Vec::new();
        let mut invalid = Vec::new();
        for r in raw {
            match self.names.resolve(self.catalog, r) {
                Some(item) => valid.push(Resolved { item, name: self.catalog.name(item).to_string() }),
                None => invalid.push(r.trim().to_string()),
            }
        }
        (valid, invalid)
    }

    pub fn record_rejection(&mut self, round: usize, invalid: Vec<String>, retry: usize) {
        self.rejections.push(Rejection { round, invalid, retry });
    }

    pub fn rejections(&self) -> &[Rejection] {
        &self.rejections
    }

    /// Stores a list after checking every entry against the catalog; entries
    /// with unknown ids or mismatched names and repeated ids are dropped.
    pub fn store(&mut self, mut list: CandidateList) -> &CandidateList {
        let mut seen = HashSet::new();
        list.entries.retain(|e| e.item < self.catalog.len() && self.catalog.name(e.item) == e.name && seen.insert(e.item));
        self.lists.push(list);
        self.lists.last().unwrap()
    }

    pub fn lists(&self) -> &[CandidateList] {
        &self.lists
    }

    pub fn is_empty(&self) -> bool {
        self.lists.iter().all(|l| l.entries.is_empty())
    }

    pub fn contains(&self, item: usize) -> bool {
        self.lists.iter().any(|l| l.entries.iter().any(|e| e.item == item))
    }

    /// Distinct candidates in chronological order of first appearance.
    pub fn chronological(&self) -> Vec<CandidateEntry> {
        let mut seen = HashSet::new();
        self.lists.iter().flat_map(|l| l.entries.iter()).filter(|e| seen.insert(e.item)).cloned().collect()
    }

    pub fn assemble(&self, n: usize, order: AssemblyOrder) -> Vec<CandidateEntry> {
        let ordered: Vec<&CandidateEntry> = match order {
            AssemblyOrder::RecencyConfidence => {
                let mut v: Vec<(usize, usize, &CandidateEntry)> = Vec::new();
                for (li, l) in self.lists.iter().enumerate() {
                    for (pos, e) in l.entries.iter().enumerate() {
                        v.push((li, pos, e));
                    }
                }
                v.sort_by(|a, b| {
                    self.lists[b.0]
                        .mark
                        .round
                        .cmp(&self.lists[a.0].mark.round)
                        .then(b.0.cmp(&a.0))
                        .then(b.2.confidence.total_cmp(&a.2.confidence))
                        .then(a.1.cmp(&b.1))
                });
                v.into_iter().map(|x| x.2).collect()
            }
            AssemblyOrder::RecentListFirst => self.lists.iter().rev().flat_map(|l| l.entries.iter()).collect(),
        };
        let mut seen = HashSet::new();
        ordered.into_iter().filter(|e| seen.insert(e.item)).take(n).cloned().collect()
    }

    /// `round, tool_type, attribute, item_id, name, confidence` rows. Rank
    /// entries carry the position-derived confidence `1/(position+1)`.
    pub fn dump(&self) -> String {
        let mut s = String::from("round\ttool_type\tattribute\titem_id\tname\tconfidence\n");
        for l in &self.lists {
            for e in &l.entries {
                let _ = writeln!(
                    s,
                    "{}\t{}\t{}\t{}\t{}\t{:.4}",
                    l.mark.round, l.mark.tool_type, l.mark.attribute, e.item, e.name, e.confidence
                );
            }
        }
        s
    }
}

/// Renders the observation the agent sees for a stored list.
pub fn render_observation(templates: &Templates, list: &CandidateList) -> String {
    templates.memory_observation(&list.mark.attribute, list.entries.len(), &render_candidates(list))
}

/// `[id, name, score]` triples, one per line.
pub fn render_candidates(list: &CandidateList) -> String {
    let mut s = String::new();
    for e in &list.entries {
        let _ = write!(s, "\n{} | {} | {:.4}", e.item, e.name, e.confidence);
    }
    s
}

/// The original prompt followed by one correction paragraph per rejection
/// round. Rendering depends only on the base and the rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct RerunPrompt {
    pub base: String,
    pub rounds: Vec<Vec<String>>,
}

impl RerunPrompt {
    pub fn new(base: impl Into<String>) -> Self {
        Self { base: base.into(), rounds: Vec::new() }
    }

    pub fn push(&mut self, invalid: Vec<String>) {
        self.rounds.push(invalid);
    }

    pub fn render(&self, templates: &Templates) -> String {
        let mut s = self.base.trim_end().to_string();
        for r in &self.rounds {
            s.push_str("\n\n");
            s.push_str(&templates.rerun(r));
        }
        s
    }
}

/// Single-shot form of [`RerunPrompt`].
pub fn build_rerun_prompt(templates: &Templates, original: &str, invalid: &[String]) -> String {
    let mut p = RerunPrompt::new(original);
    p.push(invalid.to_vec());
    p.render(templates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tools::{ToolMark, ToolType};

    fn catalog() -> ItemCatalog {
        ItemCatalog::new(vec![
            (1, "The Matrix (1999)".into()),
            (2, "Matrix Reloaded, The (2003)".into()),
            (3, "Hamlet (1990)".into()),
            (4, "Hamlet (1996)".into()),
            (5, "Schindler's List (1993)".into()),
        ])
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_name("The Matrix (1999)"), "matrix");
        assert_eq!(normalize_name("the matrix (1999)"), "matrix");
        assert_eq!(normalize_name("  Matrix Reloaded, The (2003) "), "matrix reloaded");
        assert_eq!(normalize_name("Schindler's List"), "schindlers list");
        assert_eq!(normalize_name_with_year("Hamlet (1996)"), "hamlet 1996");
    }

    #[test]
    fn resolution_order() {
        let c = catalog();
        let idx = NameIndex::new(&c);
        let m = MemoryStore::new(&c, &idx);
        let raw: Vec<String> = ["0", "the matrix (1999)", "Hamlet (1996)", "Hamlet", "schindler", "Matrix", "9", "Nope (2001)", "ma"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (valid, invalid) = m.validate(&raw);
        let ids: Vec<usize> = valid.iter().map(|r| r.item).collect();
        assert_eq!(ids, vec![0, 0, 3, 4, 0]);
        assert_eq!(valid[1].name, "The Matrix (1999)");
        assert_eq!(invalid, vec!["Hamlet", "9", "Nope (2001)", "ma"]);
    }

    fn list(round: usize, items: &[(usize, f64)], c: &ItemCatalog) -> CandidateList {
        CandidateList {
            entries: items.iter().map(|&(i, s)| CandidateEntry { item: i, name: c.name(i).into(), confidence: s }).collect(),
            mark: ToolMark { tool_type: ToolType::Retrieval, attribute: "genre".into(), round },
        }
    }

    #[test]
    fn store_drops_invalid_and_assembles() {
        let c = catalog();
        let idx = NameIndex::new(&c);
        let mut m = MemoryStore::new(&c, &idx);
        let mut bad = list(1, &[(0, 0.9), (1, 0.5)], &c);
        bad.entries[1].name = "wrong".into();
        bad.entries.push(CandidateEntry { item: 99, name: "x".into(), confidence: 1.0 });
        m.store(bad);
        assert_eq!(m.lists()[0].entries.len(), 1);
        m.store(list(2, &[(2, 0.1), (0, 0.7), (3, 0.3)], &c));
        let rc: Vec<usize> = m.assemble(10, AssemblyOrder::RecencyConfidence).iter().map(|e| e.item).collect();
        assert_eq!(rc, vec![0, 3, 2]);
        let rl: Vec<usize> = m.assemble(10, AssemblyOrder::RecentListFirst).iter().map(|e| e.item).collect();
        assert_eq!(rl, vec![2, 0, 3]);
        assert_eq!(m.assemble(2, AssemblyOrder::RecentListFirst).len(), 2);
        assert!(m.dump().lines().nth(1).unwrap().starts_with("1\tRetrieval\tgenre\t0\tThe Matrix (1999)\t0.9000"));
    }

    #[test]
    fn rerun_prompt_accumulates() {
        let t = Templates::default();
        let mut p = RerunPrompt::new("BASE");
        p.push(vec!["Fake One".into()]);
        let once = p.render(&t);
        assert_eq!(once.matches("BASE").count(), 1);
        assert!(once.contains("\"Fake One\""));
        p.push(vec!["Fake Two".into()]);
        let twice = p.render(&t);
        assert!(twice.starts_with(&once));
        assert!(twice.contains("\"Fake Two\""));
        assert_eq!(twice.matches("BASE").count(), 1);
        assert_eq!(build_rerun_prompt(&t, "BASE", &["Fake One".into()]), once);
    }
}
