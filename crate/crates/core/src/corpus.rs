//! Interaction and attribute ingestion, k-core filtering, and leave-one-out
//! splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}:{line}: bad field `{field}`: {reason}")]
    Malformed { file: PathBuf, line: usize, field: &'static str, reason: String },
    #[error("empty dataset: no users or items survive filtering")]
    EmptyDataset,
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

/// One raw interaction record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: u64,
    pub item_id: u64,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub id: usize,
    pub raw_id: u64,
    pub name: String,
}

/// The complete item pool: dense ids, display names, and attribute values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ItemCatalog {
    items: Vec<Item>,
    raw_index: HashMap<u64, usize>,
    attributes: BTreeMap<String, BTreeMap<usize, Vec<String>>>,
}

impl ItemCatalog {
    /// Builds a catalog from `(raw_id, name)` pairs in dense-id order.
    pub fn new(items: Vec<(u64, String)>) -> Self {
        let items: Vec<Item> = items
            .into_iter()
            .enumerate()
            .map(|(id, (raw_id, name))| Item { id, raw_id, name })
            .collect();
        let raw_index = items.iter().map(|i| (i.raw_id, i.id)).collect();
        Self { items, raw_index, attributes: BTreeMap::new() }
    }

    /// Sets attribute values for an item. Values are casefolded and trimmed.
    pub fn set_attribute(&mut self, attribute: &str, item: usize, values: Vec<String>) {
        assert!(item < self.items.len(), "attribute for unknown item {item}");
        let values: Vec<String> = values
            .iter()
            .map(|v| normalize_attribute_value(v))
            .filter(|v| !v.is_empty())
            .collect();
        let entry = self.attributes.entry(normalize_attribute_value(attribute)).or_default();
        if !values.is_empty() {
            entry.insert(item, values);
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn contains(&self, id: usize) -> bool {
        id < self.items.len()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.items[id].name
    }

    pub fn raw_id(&self, id: usize) -> u64 {
        self.items[id].raw_id
    }

    pub fn id_of_raw(&self, raw: u64) -> Option<usize> {
        self.raw_index.get(&raw).copied()
    }

    pub fn attribute_names(&self) -> Vec<&str> {
        self.attributes.keys().map(String::as_str).collect()
    }

    pub fn has_attribute(&self, attribute: &str) -> bool {
        self.attributes.contains_key(attribute)
    }

    /// Values of `attribute` for `item`; empty when the item lacks it.
    pub fn values(&self, attribute: &str, item: usize) -> &[String] {
        self.attributes
            .get(attribute)
            .and_then(|m| m.get(&item))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Sorted distinct values observed for `attribute`.
    pub fn vocabulary(&self, attribute: &str) -> Vec<String> {
        let mut set = BTreeSet::new();
        if let Some(m) = self.attributes.get(attribute) {
            for vals in m.values() {
                set.extend(vals.iter().cloned());
            }
        }
        set.into_iter().collect()
    }
}

pub fn normalize_attribute_value(v: &str) -> String {
    v.trim().to_lowercase()
}

/// One user's chronologically ordered history under leave-one-out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserHistory {
    pub user_id: usize,
    pub raw_user_id: u64,
    /// Training interactions, oldest first.
    pub sequence: Vec<usize>,
    pub validation_item: usize,
    pub target: usize,
}

impl UserHistory {
    /// The history visible at test time: training items plus the validation item.
    pub fn test_input(&self) -> Vec<usize> {
        let mut h = self.sequence.clone();
        h.push(self.validation_item);
        h
    }

    /// Every item the user interacted with, including held-out ones.
    pub fn all_items(&self) -> BTreeSet<usize> {
        let mut s: BTreeSet<usize> = self.sequence.iter().copied().collect();
        s.insert(self.validation_item);
        s.insert(self.target);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    pub num_users: usize,
    pub num_items: usize,
    pub num_interactions: usize,
    pub sparsity_percent: f64,
}

impl DatasetStats {
    pub fn from_counts(num_users: usize, num_items: usize, num_interactions: usize) -> Self {
        let cells = num_users as f64 * num_items as f64;
        Self {
            num_users,
            num_items,
            num_interactions,
            sparsity_percent: 100.0 * (1.0 - num_interactions as f64 / cells),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    pub histories: Vec<UserHistory>,
    pub catalog: ItemCatalog,
    pub stats: DatasetStats,
}

impl DatasetSplit {
    pub fn history(&self, user_id: usize) -> Option<&UserHistory> {
        self.histories.iter().find(|h| h.user_id == user_id)
    }
}

/// Recounts users, items, and interactions from the split itself.
pub fn compute_stats(split: &DatasetSplit) -> DatasetStats {
    let interactions: usize = split.histories.iter().map(|h| h.sequence.len() + 2).sum();
    DatasetStats::from_counts(split.histories.len(), split.catalog.len(), interactions)
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub dataset_name: String,
    /// Minimum interactions per user and per item.
    pub k_core: usize,
    /// Numeric attributes replaced by decile tokens `q0`..`q9`.
    pub bucketize: Vec<String>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { dataset_name: "dataset".into(), k_core: 0, bucketize: Vec::new() }
    }
}

/// Leave-one-out needs a training item, a validation item, and a target.
pub const MIN_USER_INTERACTIONS: usize = 3;

/// Iteratively removes users with fewer than `user_min` and items with fewer
/// than `item_min` records until nothing changes. Record order is preserved.
pub fn filter_to_fixpoint(records: &[Interaction], user_min: usize, item_min: usize) -> Vec<Interaction> {
    let mut current: Vec<Interaction> = records.to_vec();
    loop {
        let mut users: HashMap<u64, usize> = HashMap::new();
        let mut items: HashMap<u64, usize> = HashMap::new();
        for r in &current {
            *users.entry(r.user_id).or_default() += 1;
            *items.entry(r.item_id).or_default() += 1;
        }
        let before = current.len();
        current.retain(|r| users[&r.user_id] >= user_min && items[&r.item_id] >= item_min);
        if current.len() == before {
            return current;
        }
    }
}

/// Plain k-core: every retained user and item has at least `k` records.
pub fn kcore_filter(records: &[Interaction], k: usize) -> Vec<Interaction> {
    filter_to_fixpoint(records, k, k)
}

fn fields(line: &str) -> Vec<&str> {
    line.split('\t').collect()
}

fn parse_num<T: std::str::FromStr>(
    file: &Path,
    line: usize,
    field: &'static str,
    raw: Option<&&str>,
) -> Result<T, CorpusError>
where
    T::Err: std::fmt::Display,
{
    let raw = raw.ok_or_else(|| CorpusError::Malformed {
        file: file.to_path_buf(),
        line,
        field,
        reason: "missing".into(),
    })?;
    raw.trim().parse().map_err(|e: T::Err| CorpusError::Malformed {
        file: file.to_path_buf(),
        line,
        field,
        reason: format!("{e} (got `{raw}`)"),
    })
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

/// Parses an interaction file: `user_id \t item_id \t rating \t timestamp`.
pub fn read_interactions(path: &Path) -> Result<Vec<Interaction>, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in content_lines(&text) {
        let f = fields(line);
        if f.len() < 4 {
            return Err(CorpusError::Malformed {
                file: path.to_path_buf(),
                line: n,
                field: "timestamp",
                reason: format!("expected 4 tab-separated fields, found {}", f.len()),
            });
        }
        out.push(Interaction {
            user_id: parse_num(path, n, "user_id", f.first())?,
            item_id: parse_num(path, n, "item_id", f.get(1))?,
            timestamp: parse_num(path, n, "timestamp", f.get(3))?,
        });
    }
    Ok(out)
}

/// Raw attribute row: name plus `attribute -> values`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawItemRecord {
    pub name: String,
    pub attributes: Vec<(String, Vec<String>)>,
}

/// Parses `item_id \t name \t attr=v1|v2 ...`.
pub fn read_attributes(path: &Path) -> Result<HashMap<u64, RawItemRecord>, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = HashMap::new();
    for (n, line) in content_lines(&text) {
        let f = fields(line);
        let raw: u64 = parse_num(path, n, "item_id", f.first())?;
        let name = f.get(1).map(|s| s.trim()).unwrap_or("");
        if name.is_empty() {
            return Err(CorpusError::Malformed {
                file: path.to_path_buf(),
                line: n,
                field: "item_name",
                reason: "empty".into(),
            });
        }
        let mut attributes = Vec::new();
        for col in &f[2..] {
            if col.trim().is_empty() {
                continue;
            }
            let (k, v) = col.split_once('=').ok_or_else(|| CorpusError::Malformed {
                file: path.to_path_buf(),
                line: n,
                field: "attribute",
                reason: format!("expected name=value, got `{col}`"),
            })?;
            let values = v.split('|').map(|s| s.to_string()).collect();
            attributes.push((k.trim().to_string(), values));
        }
        out.insert(raw, RawItemRecord { name: name.to_string(), attributes });
    }
    Ok(out)
}

/// Reads both files and builds the split.
pub fn ingest(interaction_file: &Path, attribute_file: &Path, options: &IngestOptions) -> Result<DatasetSplit, CorpusError> {
    let records = read_interactions(interaction_file)?;
    let attrs = read_attributes(attribute_file)?;
    build_split(&records, &attrs, options)
}

/// Filters, re-indexes, orders, and splits in-memory records.
pub fn build_split(
    records: &[Interaction],
    attrs: &HashMap<u64, RawItemRecord>,
    options: &IngestOptions,
) -> Result<DatasetSplit, CorpusError> {
    let kept = filter_to_fixpoint(records, options.k_core.max(MIN_USER_INTERACTIONS), options.k_core);
    if kept.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }

    let raw_items: BTreeSet<u64> = kept.iter().map(|r| r.item_id).collect();
    let raw_users: BTreeSet<u64> = kept.iter().map(|r| r.user_id).collect();
    let mut catalog = ItemCatalog::new(
        raw_items
            .iter()
            .map(|&raw| {
                let name = attrs
                    .get(&raw)
                    .map(|r| r.name.clone())
                    .unwrap_or_else(|| format!("Item {raw}"));
                (raw, name)
            })
            .collect(),
    );
    for (id, &raw) in raw_items.iter().enumerate() {
        if let Some(rec) = attrs.get(&raw) {
            for (k, vals) in &rec.attributes {
                catalog.set_attribute(k, id, vals.clone());
            }
        }
    }
    for attribute in &options.bucketize {
        bucketize_deciles(&mut catalog, &normalize_attribute_value(attribute));
    }

    let user_index: HashMap<u64, usize> = raw_users.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let mut per_user: Vec<Vec<Interaction>> = vec![Vec::new(); raw_users.len()];
    for r in &kept {
        per_user[user_index[&r.user_id]].push(*r);
    }
    let histories = per_user
        .into_iter()
        .enumerate()
        .map(|(uid, mut recs)| {
            // stable: ties keep input record order
            recs.sort_by_key(|r| r.timestamp);
            let mut seq: Vec<usize> = recs.iter().map(|r| catalog.id_of_raw(r.item_id).expect("kept item")).collect();
            let target = seq.pop().expect("user has >= 3 records");
            let validation_item = seq.pop().expect("user has >= 3 records");
            UserHistory { user_id: uid, raw_user_id: recs[0].user_id, sequence: seq, validation_item, target }
        })
        .collect();

    let stats = DatasetStats::from_counts(raw_users.len(), catalog.len(), kept.len());
    Ok(DatasetSplit { name: options.dataset_name.clone(), histories, catalog, stats })
}

/// Replaces numeric values of `attribute` by decile tokens `q0`..`q9`,
/// ranking by the first value of each item.
pub fn bucketize_deciles(catalog: &mut ItemCatalog, attribute: &str) {
    let Some(map) = catalog.attributes.get_mut(attribute) else { return };
    let mut numeric: Vec<(usize, f64)> = map
        .iter()
        .filter_map(|(&id, vals)| vals.first().and_then(|v| v.parse::<f64>().ok()).map(|x| (id, x)))
        .filter(|(_, x)| x.is_finite())
        .collect();
    numeric.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let n = numeric.len();
    let mut buckets = BTreeMap::new();
    let mut first_rank: Option<(f64, usize)> = None;
    for (rank, &(id, x)) in numeric.iter().enumerate() {
        // equal values share the bucket of their first occurrence
        let r = match first_rank {
            Some((v, r)) if v == x => r,
            _ => {
                first_rank = Some((x, rank));
                rank
            }
        };
        buckets.insert(id, format!("q{}", (r * 10 / n).min(9)));
    }
    map.clear();
    for (id, token) in buckets {
        map.insert(id, vec![token]);
    }
}

const STATS_FILE: &str = "stats.txt";
const ITEMS_FILE: &str = "items.txt";
const ATTRS_FILE: &str = "attributes.txt";
const HISTORIES_FILE: &str = "histories.txt";

/// Writes the split as plain-text index files plus a `key=value` stats manifest.
pub fn save_split(split: &DatasetSplit, dir: &Path) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(io_err(&p))
    };

    let s = &split.stats;
    write(
        STATS_FILE,
        format!(
            "dataset={}\nnum_users={}\nnum_items={}\nnum_interactions={}\nsparsity_percent={:.4}\n",
            split.name, s.num_users, s.num_items, s.num_interactions, s.sparsity_percent
        ),
    )?;

    let mut items = String::from("# item_id\traw_id\tname\n");
    let mut attrs = String::from("# item_id\tname\tattribute=value|value...\n");
    for it in split.catalog.items() {
        let _ = writeln!(items, "{}\t{}\t{}", it.id, it.raw_id, it.name);
        let _ = write!(attrs, "{}\t{}", it.id, it.name);
        for a in split.catalog.attribute_names() {
            let vals = split.catalog.values(a, it.id);
            if !vals.is_empty() {
                let _ = write!(attrs, "\t{a}={}", vals.join("|"));
            }
        }
        attrs.push('\n');
    }
    write(ITEMS_FILE, items)?;
    write(ATTRS_FILE, attrs)?;

    let mut hist = String::from("# user_id\traw_user_id\tvalidation_item\ttarget\tsequence\n");
    for h in &split.histories {
        let seq: Vec<String> = h.sequence.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(hist, "{}\t{}\t{}\t{}\t{}", h.user_id, h.raw_user_id, h.validation_item, h.target, seq.join(" "));
    }
    write(HISTORIES_FILE, hist)
}

/// Loads a split written by [`save_split`].
pub fn load_split(dir: &Path) -> Result<DatasetSplit, CorpusError> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map(|t| (p.clone(), t)).map_err(io_err(dir))
    };

    let (stats_path, stats_text) = read(STATS_FILE)?;
    let kv: HashMap<&str, &str> = stats_text.lines().filter_map(|l| l.split_once('=')).collect();
    let name = kv.get("dataset").copied().unwrap_or("dataset").to_string();
    let bad_stats = |field: &'static str| CorpusError::Malformed {
        file: stats_path.clone(),
        line: 0,
        field,
        reason: "missing or invalid".into(),
    };
    let num_users: usize = kv.get("num_users").and_then(|v| v.parse().ok()).ok_or_else(|| bad_stats("num_users"))?;
    let num_interactions: usize = kv
        .get("num_interactions")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad_stats("num_interactions"))?;

    let (items_path, items_text) = read(ITEMS_FILE)?;
    let mut items = Vec::new();
    for (n, line) in content_lines(&items_text) {
        let f = fields(line);
        let id: usize = parse_num(&items_path, n, "item_id", f.first())?;
        if id != items.len() {
            return Err(CorpusError::Malformed {
                file: items_path,
                line: n,
                field: "item_id",
                reason: format!("ids must be contiguous, expected {}", items.len()),
            });
        }
        let raw: u64 = parse_num(&items_path, n, "raw_id", f.get(1))?;
        items.push((raw, f.get(2).unwrap_or(&"").to_string()));
    }
    let mut catalog = ItemCatalog::new(items);

    let (attrs_path, _) = read(ATTRS_FILE)?;
    for (id, rec) in read_attributes(&attrs_path)? {
        let id = id as usize;
        if !catalog.contains(id) {
            return Err(CorpusError::Malformed {
                file: attrs_path,
                line: 0,
                field: "item_id",
                reason: format!("unknown item {id}"),
            });
        }
        for (k, v) in rec.attributes {
            catalog.set_attribute(&k, id, v);
        }
    }

    let (hist_path, hist_text) = read(HISTORIES_FILE)?;
    let mut histories = Vec::new();
    for (n, line) in content_lines(&hist_text) {
        let f = fields(line);
        let check = |id: usize, field: &'static str| {
            if catalog.contains(id) {
                Ok(id)
            } else {
                Err(CorpusError::Malformed {
                    file: hist_path.clone(),
                    line: n,
                    field,
                    reason: format!("unknown item {id}"),
                })
            }
        };
        let mut sequence = Vec::new();
        for tok in f.get(4).unwrap_or(&"").split_whitespace() {
            let id: usize = parse_num(&hist_path, n, "sequence", Some(&tok))?;
            sequence.push(check(id, "sequence")?);
        }
        histories.push(UserHistory {
            user_id: parse_num(&hist_path, n, "user_id", f.first())?,
            raw_user_id: parse_num(&hist_path, n, "raw_user_id", f.get(1))?,
            validation_item: check(parse_num(&hist_path, n, "validation_item", f.get(2))?, "validation_item")?,
            target: check(parse_num(&hist_path, n, "target", f.get(3))?, "target")?,
            sequence,
        });
    }
    if histories.is_empty() || catalog.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }
    let stats = DatasetStats::from_counts(num_users, catalog.len(), num_interactions);
    Ok(DatasetSplit { name, histories, catalog, stats })
}
