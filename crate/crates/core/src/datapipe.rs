//! Interaction logs, user-level splits, next-item samples and negatives.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::stream;

/// Dense id map over external string ids, in first-appearance order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_string());
        self.index.insert(id.to_string(), i);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Two-column TSV: dense index, external id.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, id) in self.ids.iter().enumerate() {
            out.push_str(&format!("{i}\t{id}\n"));
        }
        out
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_tsv().as_bytes())
    }
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Input layouts accepted by [`load_interactions`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    /// `user \t item \t timestamp`
    Tsv,
    /// MovieLens `user::item::rating::timestamp`
    Ml10m,
    /// YooChoose `session,iso_timestamp,item,...` (clicks or buys file)
    Yoochoose,
}

impl std::str::FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(Self::Tsv),
            "ml10m" => Ok(Self::Ml10m),
            "yoochoose" => Ok(Self::Yoochoose),
            other => Err(Error::Config(format!("unknown input format `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionLog {
    pub users: Vocab,
    pub items: Vocab,
    /// Per-user `(item, timestamp)` events, sorted by timestamp with ties in
    /// input order.
    pub sequences: Vec<Vec<(usize, i64)>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogCounts {
    pub users: usize,
    pub items: usize,
    pub events: usize,
}

impl InteractionLog {
    /// Builds a log from `(user, item, timestamp)` triples in input order.
    pub fn from_records<'a, I>(records: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a str, i64)>,
    {
        let mut log = Self {
            users: Vocab::default(),
            items: Vocab::default(),
            sequences: Vec::new(),
        };
        for (u, i, ts) in records {
            log.push(u, i, ts);
        }
        log.sort();
        log
    }

    fn push(&mut self, user: &str, item: &str, ts: i64) {
        let u = self.users.intern(user);
        let i = self.items.intern(item);
        if u == self.sequences.len() {
            self.sequences.push(Vec::new());
        }
        self.sequences[u].push((i, ts));
    }

    fn sort(&mut self) {
        for seq in &mut self.sequences {
            seq.sort_by_key(|&(_, ts)| ts);
        }
    }

    pub fn counts(&self) -> LogCounts {
        LogCounts {
            users: self.users.len(),
            items: self.items.len(),
            events: self.sequences.iter().map(Vec::len).sum(),
        }
    }

    pub fn item_sequence(&self, user: usize) -> Vec<usize> {
        self.sequences[user].iter().map(|&(i, _)| i).collect()
    }

    pub fn item_set(&self, user: usize) -> HashSet<usize> {
        self.sequences[user].iter().map(|&(i, _)| i).collect()
    }

    /// Canonical TSV with external ids, one event per line, grouped by user.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        for (u, seq) in self.sequences.iter().enumerate() {
            for &(i, ts) in seq {
                writeln!(f, "{}\t{}\t{}", self.users.name(u), self.items.name(i), ts)
                    .map_err(|e| Error::io(path, e))?;
            }
        }
        f.flush().map_err(|e| Error::io(path, e))
    }
}

fn parse_line(line: &str, format: InputFormat) -> std::result::Result<(String, String, i64), String> {
    let fields: Vec<&str> = match format {
        InputFormat::Tsv => line.split('\t').collect(),
        InputFormat::Ml10m => line.split("::").collect(),
        InputFormat::Yoochoose => line.split(',').collect(),
    };
    let need = match format {
        InputFormat::Ml10m => 4,
        _ => 3,
    };
    if fields.len() < need {
        return Err(format!("expected at least {need} fields, found {}", fields.len()));
    }
    let (user, item, ts) = match format {
        InputFormat::Tsv => (fields[0], fields[1], fields[2]),
        InputFormat::Ml10m => (fields[0], fields[1], fields[3]),
        InputFormat::Yoochoose => (fields[0], fields[2], fields[1]),
    };
    if user.trim().is_empty() || item.trim().is_empty() {
        return Err("empty user or item id".into());
    }
    let ts = match format {
        InputFormat::Yoochoose => chrono::DateTime::parse_from_rfc3339(ts.trim())
            .map(|t| t.timestamp())
            .map_err(|e| format!("bad timestamp `{ts}`: {e}"))?,
        _ => ts
            .trim()
            .parse::<i64>()
            .map_err(|e| format!("bad timestamp `{ts}`: {e}"))?,
    };
    Ok((user.trim().to_string(), item.trim().to_string(), ts))
}

/// Parses interactions from a reader; `origin` is used in error messages.
pub fn read_interactions<R: BufRead>(reader: R, origin: &Path, format: InputFormat) -> Result<InteractionLog> {
    let mut log = InteractionLog {
        users: Vocab::default(),
        items: Vocab::default(),
        sequences: Vec::new(),
    };
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        // YooChoose buys/clicks files have no header, but tolerate one.
        if n == 0 && format == InputFormat::Yoochoose && line.to_ascii_lowercase().starts_with("session") {
            continue;
        }
        let (u, i, ts) = parse_line(&line, format).map_err(|message| Error::Parse {
            path: origin.to_path_buf(),
            line: n + 1,
            message,
        })?;
        log.push(&u, &i, ts);
    }
    if log.sequences.is_empty() {
        return Err(Error::EmptyDataset(origin.to_path_buf()));
    }
    log.sort();
    Ok(log)
}

pub fn load_interactions(path: &Path, format: InputFormat) -> Result<InteractionLog> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_interactions(BufReader::new(f), path, format)
}

/// Prepared-dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: PathBuf,
    pub format: InputFormat,
    /// Which YooChoose file was used (`clicks` or `buys`), when applicable.
    pub source_kind: Option<String>,
    pub counts: LogCounts,
    pub max_len: usize,
    pub item_vocab_hash: String,
    pub user_vocab_hash: String,
}

impl DatasetManifest {
    pub fn new(log: &InteractionLog, source: &Path, format: InputFormat, max_len: usize) -> Self {
        let source_kind = (format == InputFormat::Yoochoose).then(|| {
            let name = source
                .file_name()
                .map(|n| n.to_string_lossy().to_ascii_lowercase())
                .unwrap_or_default();
            if name.contains("buy") { "buys" } else { "clicks" }.to_string()
        });
        Self {
            source: source.to_path_buf(),
            format,
            source_kind,
            counts: log.counts(),
            max_len,
            item_vocab_hash: log.items.hash(),
            user_vocab_hash: log.users.hash(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded user-level split. Sizes are `round(n·r_train)`, `round(n·r_valid)`
/// and the remainder.
pub fn split_users(user_count: usize, ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if user_count < 3 {
        return Err(Error::Split { users: user_count });
    }
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n = user_count as f64;
    let n_train = (n * ratios[0]).round() as usize;
    let n_valid = ((n * ratios[1]).round() as usize).min(user_count - n_train);
    let mut users: Vec<usize> = (0..user_count).collect();
    users.shuffle(&mut stream(seed, &[0x5911]));
    let test = users.split_off(n_train + n_valid);
    let valid = users.split_off(n_train);
    Ok(DatasetSplit { train: users, valid, test })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub user: usize,
    pub history: Vec<usize>,
    pub target: usize,
    pub negatives: Vec<usize>,
}

/// Sliding next-item positions for the given users: for each position
/// `i ≥ 1`, the last `max_len` items before `i` predict item `i`.
pub fn training_positions<'a>(
    log: &'a InteractionLog,
    users: &'a [usize],
    max_len: usize,
) -> impl Iterator<Item = (usize, Vec<usize>, usize)> + 'a {
    users.iter().flat_map(move |&u| {
        let seq = log.item_sequence(u);
        if seq.len() < 2 {
            log::debug!("user {} has a single interaction; no samples", log.users.name(u));
        }
        (1..seq.len())
            .map(|i| {
                let start = i.saturating_sub(max_len);
                (u, seq[start..i].to_vec(), seq[i])
            })
            .collect::<Vec<_>>()
    })
}

/// Training samples for the train users, each with `negatives` fresh
/// negatives drawn from the stream `(seed, user, position)`.
pub fn make_training_samples(
    log: &InteractionLog,
    split: &DatasetSplit,
    max_len: usize,
    negatives: usize,
    seed: u64,
) -> Result<Vec<SequenceSample>> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let item_sets: HashMap<usize, HashSet<usize>> =
        split.train.iter().map(|&u| (u, log.item_set(u))).collect();
    training_positions(log, &split.train, max_len)
        .enumerate()
        .map(|(idx, (user, history, target))| {
            let mut rng = stream(seed, &[user as u64, idx as u64]);
            let negatives = sample_negatives(&item_sets[&user], log.items.len(), negatives, &mut rng)?;
            Ok(SequenceSample {
                user,
                history,
                target,
                negatives,
            })
        })
        .collect()
}

/// `k` distinct items drawn uniformly from `[0, item_count)` minus `exclude`.
pub fn sample_negatives<R: Rng + ?Sized>(
    exclude: &HashSet<usize>,
    item_count: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let excluded = exclude.iter().filter(|&&i| i < item_count).count();
    let available = item_count - excluded;
    if available < k {
        return Err(Error::Sampling { wanted: k, available });
    }
    if available <= 4 * k {
        let pool: Vec<usize> = (0..item_count).filter(|i| !exclude.contains(i)).collect();
        return Ok(rand::seq::index::sample(rng, pool.len(), k)
            .into_iter()
            .map(|j| pool[j])
            .collect());
    }
    let mut out = Vec::with_capacity(k);
    let mut seen = HashSet::with_capacity(k);
    while out.len() < k {
        let c = rng.random_range(0..item_count);
        if !exclude.contains(&c) && seen.insert(c) {
            out.push(c);
        }
    }
    Ok(out)
}

/// One held-out user: the model sees `history`, and `targets` are the items
/// it should retrieve.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub user: usize,
    pub history: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Users shorter than this are dropped from evaluation.
pub const MIN_EVAL_LEN: usize = 5;

/// Held-out construction: the first 80% of a user's sequence (last `max_len`
/// of it) is the input, the distinct remaining items are the targets.
pub fn make_eval_cases(log: &InteractionLog, users: &[usize], max_len: usize) -> Vec<EvalCase> {
    let mut dropped = 0;
    let cases: Vec<EvalCase> = users
        .iter()
        .filter_map(|&u| {
            let seq = log.item_sequence(u);
            if seq.len() < MIN_EVAL_LEN {
                dropped += 1;
                return None;
            }
            let split = seq.len() * 4 / 5;
            let start = split.saturating_sub(max_len);
            let mut seen = HashSet::new();
            let targets = seq[split..].iter().copied().filter(|i| seen.insert(*i)).collect();
            Some(EvalCase {
                user: u,
                history: seq[start..split].to_vec(),
                targets,
            })
        })
        .collect();
    if dropped > 0 {
        log::info!("dropped {dropped} users with fewer than {MIN_EVAL_LEN} interactions from evaluation");
    }
    cases
}

/// A loaded log, its split, and the truncation length.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub log: InteractionLog,
    pub split: DatasetSplit,
    pub max_len: usize,
}

impl Dataset {
    pub fn new(log: InteractionLog, max_len: usize, seed: u64) -> Result<Self> {
        let split = split_users(log.users.len(), [0.8, 0.1, 0.1], seed)?;
        Ok(Self { log, split, max_len })
    }

    pub fn item_count(&self) -> usize {
        self.log.items.len()
    }

    pub fn valid_cases(&self) -> Vec<EvalCase> {
        make_eval_cases(&self.log, &self.split.valid, self.max_len)
    }

    pub fn test_cases(&self) -> Vec<EvalCase> {
        make_eval_cases(&self.log, &self.split.test, self.max_len)
    }
}
