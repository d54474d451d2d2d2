//! Interaction and attribute ingestion, k-core filtering, per-user sequences
//! and leave-one-out splits.
//!
//! Index 0 is the padding sentinel for both the item and the attribute
//! vocabulary; real items are numbered `1..=n_items`, real attributes
//! `1..=n_attrs`. Users are numbered from 0.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub ts: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawInteractions {
    pub records: Vec<Interaction>,
}

impl RawInteractions {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InteractionFormat {
    Tsv,
    JsonLines,
}

impl FromStr for InteractionFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tsv" => Ok(Self::Tsv),
            "json-lines" | "jsonl" => Ok(Self::JsonLines),
            other => Err(format!("unknown interaction format {other:?}")),
        }
    }
}

fn malformed(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::MalformedLine {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

/// JSON ids may be written as strings or numbers.
fn json_id(v: Option<&Value>) -> Option<String> {
    match v? {
        Value::String(s) if !s.is_empty() => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_line(path: &Path, line_no: usize, line: &str, format: InteractionFormat) -> Result<Interaction> {
    match format {
        InteractionFormat::Tsv => {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(malformed(path, line_no, format!("expected 3 tab-separated fields, got {}", fields.len())));
            }
            let (user, item) = (fields[0].trim(), fields[1].trim());
            if user.is_empty() || item.is_empty() {
                return Err(malformed(path, line_no, "empty user or item id"));
            }
            let ts = fields[2]
                .trim()
                .parse::<i64>()
                .map_err(|e| malformed(path, line_no, format!("bad timestamp: {e}")))?;
            Ok(Interaction {
                user: user.to_string(),
                item: item.to_string(),
                ts,
            })
        }
        InteractionFormat::JsonLines => {
            let v: Value = serde_json::from_str(line).map_err(|e| malformed(path, line_no, e.to_string()))?;
            let user = json_id(v.get("user")).ok_or_else(|| malformed(path, line_no, "missing \"user\""))?;
            let item = json_id(v.get("item")).ok_or_else(|| malformed(path, line_no, "missing \"item\""))?;
            let ts = v
                .get("ts")
                .and_then(Value::as_i64)
                .ok_or_else(|| malformed(path, line_no, "missing or non-integer \"ts\""))?;
            Ok(Interaction { user, item, ts })
        }
    }
}

/// Parses interactions from any reader. `path` is only used in error messages.
pub fn read_interactions<R: BufRead>(reader: R, path: &Path, format: InteractionFormat) -> Result<RawInteractions> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_line(path, i + 1, &line, format)?);
    }
    if records.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    Ok(RawInteractions { records })
}

pub fn load_interactions(path: impl AsRef<Path>, format: InteractionFormat) -> Result<RawInteractions> {
    let path = path.as_ref();
    let file = File::open(path)?;
    read_interactions(BufReader::new(file), path, format)
}

/// Repeatedly drops users and items with fewer than `k` records until every
/// remaining user and item has at least `k`.
pub fn k_core_filter(raw: &RawInteractions, k: usize) -> Result<RawInteractions> {
    assert!(k >= 1, "k must be at least 1");
    let mut records = raw.records.clone();
    loop {
        let mut user_count: HashMap<&str, usize> = HashMap::new();
        let mut item_count: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            *user_count.entry(&r.user).or_default() += 1;
            *item_count.entry(&r.item).or_default() += 1;
        }
        let keep: Vec<bool> = records
            .iter()
            .map(|r| user_count[r.user.as_str()] >= k && item_count[r.item.as_str()] >= k)
            .collect();
        if keep.iter().all(|&b| b) {
            break;
        }
        let mut it = keep.into_iter();
        records.retain(|_| it.next().unwrap_or(false));
    }
    if records.is_empty() {
        return Err(Error::EmptyAfterFilter { k });
    }
    Ok(RawInteractions { records })
}

/// Bidirectional maps between raw string ids and dense indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    /// `users[u]` is the raw id of user index `u`.
    pub users: Vec<String>,
    /// `items[i - 1]` is the raw id of item index `i`.
    pub items: Vec<String>,
    /// `attributes[a - 1]` is the raw id of attribute index `a`.
    pub attributes: Vec<String>,
    #[serde(skip)]
    user_to_index: HashMap<String, usize>,
    #[serde(skip)]
    item_to_index: HashMap<String, usize>,
    #[serde(skip)]
    attr_to_index: HashMap<String, usize>,
}

impl Vocab {
    /// Users and items are numbered in lexicographic order of their raw ids.
    pub fn from_interactions(raw: &RawInteractions) -> Self {
        let users: BTreeSet<&str> = raw.records.iter().map(|r| r.user.as_str()).collect();
        let items: BTreeSet<&str> = raw.records.iter().map(|r| r.item.as_str()).collect();
        let mut vocab = Vocab {
            users: users.into_iter().map(String::from).collect(),
            items: items.into_iter().map(String::from).collect(),
            ..Default::default()
        };
        vocab.rebuild_maps();
        vocab
    }

    pub(crate) fn rebuild_maps(&mut self) {
        self.user_to_index = self.users.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();
        self.item_to_index = self.items.iter().enumerate().map(|(i, s)| (s.clone(), i + 1)).collect();
        self.attr_to_index = self.attributes.iter().enumerate().map(|(i, s)| (s.clone(), i + 1)).collect();
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_attrs(&self) -> usize {
        self.attributes.len()
    }

    pub fn item_index(&self, raw: &str) -> Option<usize> {
        self.item_to_index.get(raw).copied()
    }

    pub fn attr_index(&self, raw: &str) -> Option<usize> {
        self.attr_to_index.get(raw).copied()
    }

    pub fn user_index(&self, raw: &str) -> Option<usize> {
        self.user_to_index.get(raw).copied()
    }

    fn set_attributes(&mut self, attrs: Vec<String>) {
        self.attributes = attrs;
        self.rebuild_maps();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user: usize,
    pub items: Vec<usize>,
}

/// Groups records per user and orders each user's items by timestamp.
/// Equal timestamps keep their input order.
pub fn build_sequences(raw: &RawInteractions, vocab: &Vocab) -> Result<Vec<InteractionSequence>> {
    let mut per_user: Vec<Vec<(i64, usize)>> = vec![Vec::new(); vocab.n_users()];
    for r in &raw.records {
        let item = vocab.item_index(&r.item).ok_or_else(|| Error::UnknownItem(r.item.clone()))?;
        let user = vocab.user_index(&r.user).ok_or_else(|| Error::UnknownItem(format!("user {}", r.user)))?;
        per_user[user].push((r.ts, item));
    }
    Ok(per_user
        .into_iter()
        .enumerate()
        .filter(|(_, recs)| !recs.is_empty())
        .map(|(user, mut recs)| {
            recs.sort_by_key(|&(ts, _)| ts);
            InteractionSequence {
                user,
                items: recs.into_iter().map(|(_, i)| i).collect(),
            }
        })
        .collect())
}

/// Item index → sorted, deduplicated attribute indices. Entry 0 (padding) is
/// always empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeTable {
    pub attrs: Vec<Vec<usize>>,
}

impl AttributeTable {
    pub fn empty(n_items: usize) -> Self {
        Self {
            attrs: vec![Vec::new(); n_items + 1],
        }
    }

    pub fn of(&self, item: usize) -> &[usize] {
        self.attrs.get(item).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn n_items(&self) -> usize {
        self.attrs.len().saturating_sub(1)
    }

    /// Builds the table from raw `(item, attrs)` records and assigns attribute
    /// indices (lexicographic over attributes of retained items) into `vocab`.
    pub fn from_records(records: &[(String, Vec<String>)], vocab: &mut Vocab) -> Self {
        let retained: Vec<(usize, &Vec<String>)> = records
            .iter()
            .filter_map(|(item, attrs)| vocab.item_index(item).map(|i| (i, attrs)))
            .collect();
        let names: BTreeSet<&str> = retained.iter().flat_map(|(_, a)| a.iter().map(String::as_str)).collect();
        vocab.set_attributes(names.into_iter().map(String::from).collect());

        let mut table = Self::empty(vocab.n_items());
        for (item, attrs) in retained {
            let entry = &mut table.attrs[item];
            entry.extend(attrs.iter().filter_map(|a| vocab.attr_index(a)));
            entry.sort_unstable();
            entry.dedup();
        }
        table
    }
}

pub fn read_attribute_records<R: BufRead>(reader: R, path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| malformed(path, i + 1, e.to_string()))?;
        let item = json_id(v.get("item")).ok_or_else(|| malformed(path, i + 1, "missing \"item\""))?;
        let attrs = v
            .get("attrs")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed(path, i + 1, "missing \"attrs\" array"))?
            .iter()
            .map(|a| json_id(Some(a)).ok_or_else(|| malformed(path, i + 1, "attribute ids must be strings or numbers")))
            .collect::<Result<Vec<_>>>()?;
        out.push((item, attrs));
    }
    Ok(out)
}

/// Reads a JSON-lines attribute file (`{"item": …, "attrs": […]}`) and fills
/// the attribute side of `vocab`.
pub fn load_attributes(path: impl AsRef<Path>, vocab: &mut Vocab) -> Result<AttributeTable> {
    let path = path.as_ref();
    let records = read_attribute_records(BufReader::new(File::open(path)?), path)?;
    Ok(AttributeTable::from_records(&records, vocab))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub users: Vec<usize>,
    pub train: Vec<Vec<usize>>,
    pub valid_target: Vec<usize>,
    pub test_target: Vec<usize>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// The untruncated sequence of the `row`-th user.
    pub fn full(&self, row: usize) -> Vec<usize> {
        let mut s = self.train[row].clone();
        s.push(self.valid_target[row]);
        s.push(self.test_target[row]);
        s
    }
}

/// Holds out the last item of every sequence for testing and the one before
/// it for validation.
pub fn leave_one_out_split(seqs: &[InteractionSequence]) -> Result<DatasetSplit> {
    let mut split = DatasetSplit {
        users: Vec::with_capacity(seqs.len()),
        train: Vec::with_capacity(seqs.len()),
        valid_target: Vec::with_capacity(seqs.len()),
        test_target: Vec::with_capacity(seqs.len()),
    };
    for s in seqs {
        let n = s.items.len();
        if n < 3 {
            return Err(Error::SequenceTooShort {
                user: s.user,
                len: n,
                min: 3,
            });
        }
        split.users.push(s.user);
        split.train.push(s.items[..n - 2].to_vec());
        split.valid_target.push(s.items[n - 2]);
        split.test_target.push(s.items[n - 1]);
    }
    Ok(split)
}

/// Keeps the most recent `max_len` items and left-pads with 0.
pub fn truncate_pad(items: &[usize], max_len: usize) -> (Vec<usize>, Vec<bool>) {
    assert!(max_len >= 1, "max_len must be at least 1");
    let kept = &items[items.len().saturating_sub(max_len)..];
    let pad = max_len - kept.len();
    let mut ids = vec![0; pad];
    ids.extend_from_slice(kept);
    let mut valid = vec![false; pad];
    valid.extend(std::iter::repeat_n(true, kept.len()));
    (ids, valid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub actions: usize,
    pub avg_actions_per_user: f64,
    pub sparsity: f64,
    pub attributes: usize,
    pub avg_attrs_per_item: f64,
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<22}{:>12}", "# Users", self.users)?;
        writeln!(f, "{:<22}{:>12}", "# Items", self.items)?;
        writeln!(f, "{:<22}{:>12.1}", "# Avg. Actions / User", self.avg_actions_per_user)?;
        writeln!(f, "{:<22}{:>12.1}", "# Avg. Actions / Item", self.actions as f64 / self.items.max(1) as f64)?;
        writeln!(f, "{:<22}{:>12}", "# Actions", self.actions)?;
        writeln!(f, "{:<22}{:>11.2}%", "Sparsity", self.sparsity * 100.0)?;
        writeln!(f, "{:<22}{:>12}", "# Attributes", self.attributes)?;
        write!(f, "{:<22}{:>12.1}", "# Avg. Attrs / Item", self.avg_attrs_per_item)
    }
}

/// A fully preprocessed dataset, as stored in a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub sequences: Vec<InteractionSequence>,
    pub attributes: AttributeTable,
    pub split: DatasetSplit,
}

#[derive(Serialize, Deserialize)]
struct AttributeLine {
    item: usize,
    attrs: Vec<usize>,
}

impl Dataset {
    /// Runs the whole pipeline: k-core, vocabulary, sequences, attributes, split.
    pub fn preprocess(raw: &RawInteractions, attr_records: Option<&[(String, Vec<String>)]>, k: usize) -> Result<Self> {
        let filtered = k_core_filter(raw, k)?;
        let mut vocab = Vocab::from_interactions(&filtered);
        let sequences = build_sequences(&filtered, &vocab)?;
        let attributes = match attr_records {
            Some(records) => AttributeTable::from_records(records, &mut vocab),
            None => AttributeTable::empty(vocab.n_items()),
        };
        let split = leave_one_out_split(&sequences)?;
        Ok(Self {
            vocab,
            sequences,
            attributes,
            split,
        })
    }

    pub fn n_items(&self) -> usize {
        self.vocab.n_items()
    }

    pub fn n_attrs(&self) -> usize {
        self.vocab.n_attrs()
    }

    pub fn stats(&self) -> DatasetStats {
        let actions: usize = self.sequences.iter().map(|s| s.items.len()).sum();
        let users = self.sequences.len();
        let items = self.n_items();
        let attr_total: usize = self.attributes.attrs.iter().map(Vec::len).sum();
        DatasetStats {
            users,
            items,
            actions,
            avg_actions_per_user: actions as f64 / users.max(1) as f64,
            sparsity: 1.0 - actions as f64 / (users.max(1) * items.max(1)) as f64,
            attributes: self.n_attrs(),
            avg_attrs_per_item: attr_total as f64 / items.max(1) as f64,
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("vocab.json"))?), &self.vocab)?;

        let mut w = BufWriter::new(File::create(dir.join("sequences.jsonl"))?);
        for s in &self.sequences {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;

        let mut w = BufWriter::new(File::create(dir.join("attributes.jsonl"))?);
        for (item, attrs) in self.attributes.attrs.iter().enumerate().skip(1) {
            serde_json::to_writer(&mut w, &AttributeLine { item, attrs: attrs.clone() })?;
            w.write_all(b"\n")?;
        }
        w.flush()?;

        serde_json::to_writer(BufWriter::new(File::create(dir.join("split.json"))?), &self.split)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut vocab: Vocab = serde_json::from_reader(BufReader::new(File::open(dir.join("vocab.json"))?))?;
        vocab.rebuild_maps();

        let seq_path = dir.join("sequences.jsonl");
        let sequences = read_jsonl::<InteractionSequence>(&seq_path)?;

        let mut attributes = AttributeTable::empty(vocab.n_items());
        let attr_path = dir.join("attributes.jsonl");
        for (line_no, line) in read_jsonl::<AttributeLine>(&attr_path)?.into_iter().enumerate() {
            if line.item == 0 || line.item > vocab.n_items() || line.attrs.iter().any(|&a| a == 0 || a > vocab.n_attrs()) {
                return Err(malformed(&attr_path, line_no + 1, "index out of vocabulary range"));
            }
            attributes.attrs[line.item] = line.attrs;
        }

        let split: DatasetSplit = serde_json::from_reader(BufReader::new(File::open(dir.join("split.json"))?))?;
        Ok(Self {
            vocab,
            sequences,
            attributes,
            split,
        })
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &PathBuf) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| malformed(path, i + 1, e.to_string()))?);
    }
    Ok(out)
}
