//! Interaction ingestion and the preprocessing protocol: time-window
//! truncation, iterative k-core filtering, chronological 8:1:1 split,
//! title tokenization, training frequencies and popularity groups.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub title: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(InputFormat::Csv),
            "jsonl" => Ok(InputFormat::Jsonl),
            other => Err(Error::Config(format!("unknown input format {other:?}"))),
        }
    }
}

/// Records in file order, plus the number of rows that parsed but violated a
/// record invariant (blank title, negative timestamp) and were dropped.
#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub records: Vec<InteractionRecord>,
    pub malformed: usize,
}

#[derive(Deserialize)]
struct JsonRow {
    user: Option<serde_json::Value>,
    item: Option<serde_json::Value>,
    title: Option<String>,
    ts: Option<serde_json::Value>,
}

fn id_field(value: Option<serde_json::Value>, name: &str, row: usize) -> Result<String> {
    match value {
        Some(serde_json::Value::String(s)) => Ok(s),
        Some(serde_json::Value::Number(n)) => Ok(n.to_string()),
        Some(other) => Err(Error::Parse {
            row,
            message: format!("field {name:?} must be a string, got {other}"),
        }),
        None => Err(Error::Parse {
            row,
            message: format!("missing field {name:?}"),
        }),
    }
}

fn timestamp_field(value: Option<serde_json::Value>, row: usize) -> Result<i64> {
    let bad = |message: String| Error::Parse { row, message };
    match value {
        Some(serde_json::Value::Number(n)) => n
            .as_i64()
            .ok_or_else(|| bad(format!("timestamp {n} is not an integer"))),
        Some(serde_json::Value::String(s)) => s
            .trim()
            .parse()
            .map_err(|_| bad(format!("timestamp {s:?} is not an integer"))),
        Some(other) => Err(bad(format!("timestamp must be an integer, got {other}"))),
        None => Err(bad("missing field \"ts\"".to_string())),
    }
}

fn accept(record: InteractionRecord, out: &mut Ingested) {
    if record.title.trim().is_empty() || record.timestamp < 0 {
        out.malformed += 1;
    } else {
        out.records.push(record);
    }
}

/// Reads an interaction log. CSV needs a `user,item,title,timestamp` header;
/// JSONL rows carry `user`, `item`, `title`, `ts`. Row numbers in errors are
/// 1-based data rows (the CSV header is not counted).
pub fn ingest_interactions(path: &Path, format: InputFormat) -> Result<Ingested> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        InputFormat::Jsonl => ingest_jsonl(BufReader::new(file), path),
        InputFormat::Csv => ingest_csv(file),
    }
}

fn ingest_jsonl(reader: impl BufRead, path: &Path) -> Result<Ingested> {
    let mut out = Ingested::default();
    for (idx, line) in reader.lines().enumerate() {
        let row = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JsonRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let title = parsed.title.ok_or_else(|| Error::Parse {
            row,
            message: "missing field \"title\"".to_string(),
        })?;
        let record = InteractionRecord {
            user_id: id_field(parsed.user, "user", row)?,
            item_id: id_field(parsed.item, "item", row)?,
            title,
            timestamp: timestamp_field(parsed.ts, row)?,
        };
        accept(record, &mut out);
    }
    Ok(out)
}

fn ingest_csv(file: File) -> Result<Ingested> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(cu), Some(ci), Some(ct), Some(cts)) = (
        column("user"),
        column("item"),
        column("title"),
        column("timestamp"),
    ) else {
        return Err(Error::Parse {
            row: 0,
            message: "header must contain user,item,title,timestamp".to_string(),
        });
    };
    let mut out = Ingested::default();
    for (idx, rec) in reader.records().enumerate() {
        let row = idx + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let field = |c: usize, name: &str| {
            rec.get(c).map(str::to_string).ok_or_else(|| Error::Parse {
                row,
                message: format!("missing field {name:?}"),
            })
        };
        let ts_raw = field(cts, "timestamp")?;
        let timestamp = ts_raw.trim().parse().map_err(|_| Error::Parse {
            row,
            message: format!("timestamp {ts_raw:?} is not an integer"),
        })?;
        let record = InteractionRecord {
            user_id: field(cu, "user")?,
            item_id: field(ci, "item")?,
            title: field(ct, "title")?,
            timestamp,
        };
        accept(record, &mut out);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// One next-item prediction instance: the user's most recent items (oldest
/// first) and the item that followed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub user: String,
    pub history: Vec<String>,
    pub target: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    pub max_history_len: usize,
    /// Title of every item that survived filtering.
    pub titles: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct ExampleLine {
    split: Split,
    #[serde(flatten)]
    example: Example,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-user training sequences in chronological order, keyed by user.
    /// Each training example is one interaction, so these sequences hold every
    /// training interaction exactly once.
    pub fn train_sequences(&self) -> BTreeMap<String, Vec<String>> {
        let mut seqs: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for ex in &self.train {
            seqs.entry(ex.user.clone())
                .or_default()
                .push(ex.target.clone());
        }
        seqs
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (split, examples) in [
            (Split::Train, &self.train),
            (Split::Valid, &self.valid),
            (Split::Test, &self.test),
        ] {
            for example in examples {
                let line = ExampleLine {
                    split,
                    example: example.clone(),
                };
                serde_json::to_writer(&mut w, &line)?;
                w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Loads examples written by [`Dataset::write_manifest`]; titles come from
    /// the catalog manifest.
    pub fn read_manifest(path: &Path, catalog: &Catalog) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dataset = Dataset {
            titles: catalog
                .items
                .iter()
                .map(|(id, item)| (id.clone(), item.title.clone()))
                .collect(),
            ..Dataset::default()
        };
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ExampleLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                row: idx + 1,
                message: e.to_string(),
            })?;
            dataset.max_history_len = dataset.max_history_len.max(parsed.example.history.len());
            match parsed.split {
                Split::Train => dataset.train.push(parsed.example),
                Split::Valid => dataset.valid.push(parsed.example),
                Split::Test => dataset.test.push(parsed.example),
            }
        }
        Ok(dataset)
    }
}

/// Inclusive timestamp window applied before k-core filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeWindow {
    pub start: i64,
    pub end: i64,
}

/// Iteratively drops users and items with fewer than `k_core` interactions
/// until nothing changes.
pub fn k_core_filter(mut records: Vec<InteractionRecord>, k_core: usize) -> Vec<InteractionRecord> {
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            *users.entry(&r.user_id).or_default() += 1;
            *items.entry(&r.item_id).or_default() += 1;
        }
        let keep: Vec<bool> = records
            .iter()
            .map(|r| users[r.user_id.as_str()] >= k_core && items[r.item_id.as_str()] >= k_core)
            .collect();
        if keep.iter().all(|&k| k) {
            return records;
        }
        let mut flags = keep.into_iter();
        records.retain(|_| flags.next().unwrap_or(false));
    }
}

/// Sizes of the train/valid/test splits for `n` interactions.
///
/// Train gets `floor(0.8 n)`, valid gets `floor(0.9 n) - floor(0.8 n)` and
/// test takes the rest.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let valid = n * 9 / 10 - train;
    (train, valid, n - train - valid)
}

pub fn preprocess(
    records: Vec<InteractionRecord>,
    k_core: usize,
    max_len: usize,
    time_window: Option<TimeWindow>,
) -> Result<Dataset> {
    if k_core == 0 {
        return Err(Error::Config("k_core must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let windowed: Vec<_> = match time_window {
        Some(w) => records
            .into_iter()
            .filter(|r| r.timestamp >= w.start && r.timestamp <= w.end)
            .collect(),
        None => records,
    };
    let mut kept = k_core_filter(windowed, k_core);
    if kept.is_empty() {
        return Err(Error::EmptyDataset);
    }
    kept.sort_by(|a, b| {
        (a.timestamp, &a.user_id, &a.item_id).cmp(&(b.timestamp, &b.user_id, &b.item_id))
    });

    let mut titles = BTreeMap::new();
    for r in &kept {
        titles
            .entry(r.item_id.clone())
            .or_insert_with(|| r.title.trim().to_string());
    }

    let (n_train, n_valid, _) = split_sizes(kept.len());
    let mut dataset = Dataset {
        max_history_len: max_len,
        titles,
        ..Dataset::default()
    };
    let mut seen: HashMap<String, Vec<String>> = HashMap::new();
    for (idx, r) in kept.into_iter().enumerate() {
        let past = seen.entry(r.user_id.clone()).or_default();
        let start = past.len().saturating_sub(max_len);
        let example = Example {
            user: r.user_id,
            history: past[start..].to_vec(),
            target: r.item_id.clone(),
        };
        past.push(r.item_id);
        if idx < n_train {
            dataset.train.push(example);
        } else if idx < n_train + n_valid {
            dataset.valid.push(example);
        } else {
            dataset.test.push(example);
        }
    }
    Ok(dataset)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Tokenizer {
    #[default]
    Word,
    Char,
}

impl std::str::FromStr for Tokenizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(Tokenizer::Word),
            "char" => Ok(Tokenizer::Char),
            other => Err(Error::Config(format!("unknown tokenizer {other:?}"))),
        }
    }
}

impl std::fmt::Display for Tokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Tokenizer::Word => "word",
            Tokenizer::Char => "char",
        })
    }
}

pub fn tokenize(title: &str, tokenizer: Tokenizer) -> Vec<String> {
    match tokenizer {
        Tokenizer::Word => title.split_whitespace().map(str::to_string).collect(),
        Tokenizer::Char => title.chars().map(String::from).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogItem {
    pub title: String,
    pub tokens: Vec<String>,
    pub frequency: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub items: BTreeMap<String, CatalogItem>,
    pub tokenizer: Tokenizer,
}

#[derive(Serialize, Deserialize)]
struct CatalogLine {
    id: String,
    title: String,
    tokens: Vec<String>,
    frequency: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    group: Option<usize>,
}

impl Catalog {
    /// Builds a catalog from `(item_id, title, frequency)` triples, checking
    /// that no two items share a token sequence.
    pub fn from_items<I, S, T>(items: I, tokenizer: Tokenizer) -> Result<Self>
    where
        I: IntoIterator<Item = (S, T, u64)>,
        S: Into<String>,
        T: Into<String>,
    {
        let mut map = BTreeMap::new();
        let mut by_tokens: HashMap<Vec<String>, String> = HashMap::new();
        for (id, title, frequency) in items {
            let id = id.into();
            let title = title.into();
            let tokens = tokenize(&title, tokenizer);
            if tokens.is_empty() {
                return Err(Error::Config(format!("item {id:?} has an empty title")));
            }
            if let Some(prev) = by_tokens.insert(tokens.clone(), id.clone()) {
                if prev != id {
                    let (first, second) = if prev < id { (prev, id) } else { (id, prev) };
                    return Err(Error::DuplicateTitle { first, second });
                }
            }
            map.insert(
                id,
                CatalogItem {
                    title,
                    tokens,
                    frequency,
                },
            );
        }
        Ok(Catalog {
            items: map,
            tokenizer,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&CatalogItem> {
        self.items.get(id)
    }

    pub fn frequencies(&self) -> BTreeMap<String, f64> {
        self.items
            .iter()
            .map(|(id, item)| (id.clone(), item.frequency as f64))
            .collect()
    }

    pub fn total_frequency(&self) -> u64 {
        self.items.values().map(|i| i.frequency).sum()
    }

    pub fn write_manifest(&self, path: &Path, groups: Option<&GroupAssignment>) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (id, item) in &self.items {
            let line = CatalogLine {
                id: id.clone(),
                title: item.title.clone(),
                tokens: item.tokens.clone(),
                frequency: item.frequency,
                group: groups.and_then(|g| g.group_of.get(id).copied()),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a catalog manifest. Tokens are re-derived from titles so the
    /// duplicate check runs again; the stored token list must agree.
    pub fn read_manifest(path: &Path, tokenizer: Tokenizer) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: CatalogLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                row: idx + 1,
                message: e.to_string(),
            })?;
            if parsed.tokens != tokenize(&parsed.title, tokenizer) {
                return Err(Error::Parse {
                    row: idx + 1,
                    message: format!(
                        "tokens for {:?} do not match the {tokenizer} tokenizer",
                        parsed.id
                    ),
                });
            }
            lines.push((parsed.id, parsed.title, parsed.frequency));
        }
        Catalog::from_items(lines, tokenizer)
    }
}

/// Builds the catalog over every item in the dataset. Frequency counts each
/// training interaction once; items seen only in valid/test get frequency 0.
pub fn build_catalog(dataset: &Dataset, tokenizer: Tokenizer) -> Result<Catalog> {
    if dataset.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut freq: BTreeMap<&str, u64> = dataset.titles.keys().map(|k| (k.as_str(), 0)).collect();
    for ex in &dataset.train {
        *freq.entry(ex.target.as_str()).or_default() += 1;
    }
    let triples: Result<Vec<_>> = freq
        .into_iter()
        .map(|(id, f)| {
            let title = dataset
                .titles
                .get(id)
                .ok_or_else(|| Error::UnknownItem(id.to_string()))?;
            Ok((id.to_string(), title.clone(), f))
        })
        .collect();
    Catalog::from_items(triples?, tokenizer)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupAssignment {
    pub group_of: BTreeMap<String, usize>,
    pub groups: usize,
    /// Share of training interaction mass held by each group.
    pub history_share: Vec<f64>,
}

impl GroupAssignment {
    pub fn group(&self, item: &str) -> Option<usize> {
        self.group_of.get(item).copied()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.groups];
        for &g in self.group_of.values() {
            sizes[g] += 1;
        }
        sizes
    }
}

fn equal_bins(n: usize, groups: usize) -> Vec<usize> {
    let base = n / groups;
    let extra = n % groups;
    (0..groups).map(|g| base + usize::from(g < extra)).collect()
}

/// Partitions items into `groups` popularity bins, group 0 being the most
/// popular. Items are sorted by descending frequency, ties by item id, and
/// cut into bins whose sizes differ by at most one (the remainder goes to the
/// most popular bins).
pub fn assign_popularity_groups(catalog: &Catalog, groups: usize) -> Result<GroupAssignment> {
    if groups == 0 {
        return Err(Error::Config("number of groups must be at least 1".into()));
    }
    if catalog.is_empty() {
        return Err(Error::Config("cannot group an empty catalog".into()));
    }
    if groups > catalog.len() {
        return Err(Error::Config(format!(
            "{groups} groups requested for {} items",
            catalog.len()
        )));
    }
    let mut order: Vec<(&String, u64)> = catalog
        .items
        .iter()
        .map(|(id, item)| (id, item.frequency))
        .collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let sizes = equal_bins(order.len(), groups);

    let mut group_of = BTreeMap::new();
    let mut pos = 0;
    for (g, &size) in sizes.iter().enumerate() {
        for (id, _) in &order[pos..pos + size] {
            group_of.insert((*id).clone(), g);
        }
        pos += size;
    }

    let total = catalog.total_frequency();
    let mut history_share = vec![0.0; groups];
    if total > 0 {
        let mut mass = vec![0u64; groups];
        for (id, item) in &catalog.items {
            mass[group_of[id]] += item.frequency;
        }
        for (share, m) in history_share.iter_mut().zip(mass) {
            *share = m as f64 / total as f64;
        }
    } else {
        let mut counts = vec![0usize; groups];
        for &g in group_of.values() {
            counts[g] += 1;
        }
        for (share, c) in history_share.iter_mut().zip(counts) {
            *share = c as f64 / catalog.len() as f64;
        }
    }
    Ok(GroupAssignment {
        group_of,
        groups,
        history_share,
    })
}
