//! Retrieval metrics, evaluation reports, linear probing and category
//! diversity.
//!
//! "HR@N" and "Recall@N" are the same quantity here: the per-user fraction
//! of held-out targets found in the top N, averaged over users.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datapipe::{EvalCase, Vocab};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::inference::Recommender;
use crate::numerics::Tensor;
use crate::rng::stream;

fn check_n(recommended: &[usize], n: usize) -> Result<()> {
    if n == 0 || n > recommended.len() {
        return Err(Error::Contract(format!(
            "cutoff {n} outside 1..={}",
            recommended.len()
        )));
    }
    Ok(())
}

/// `|top-n ∩ targets| / |targets|`; `None` when there are no targets.
pub fn recall_at_n(recommended: &[usize], targets: &HashSet<usize>, n: usize) -> Result<Option<f64>> {
    check_n(recommended, n)?;
    if targets.is_empty() {
        return Ok(None);
    }
    let hits = recommended[..n].iter().filter(|i| targets.contains(i)).count();
    Ok(Some(hits as f64 / targets.len() as f64))
}

/// Binary-gain NDCG with a `1/log₂(rank+1)` discount.
pub fn ndcg_at_n(recommended: &[usize], targets: &HashSet<usize>, n: usize) -> Result<Option<f64>> {
    check_n(recommended, n)?;
    if targets.is_empty() {
        return Ok(None);
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = recommended[..n]
        .iter()
        .enumerate()
        .filter(|(_, i)| targets.contains(i))
        .map(|(r, _)| discount(r + 1))
        .sum();
    let idcg: f64 = (1..=n.min(targets.len())).map(discount).sum();
    Ok(Some(dcg / idcg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRow {
    pub user: usize,
    pub targets: usize,
    /// One value per cutoff, in `EvalReport::ns` order.
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ns: Vec<usize>,
    /// `"recall@20"`, `"ndcg@50"`, … averaged over evaluated users.
    pub metrics: BTreeMap<String, f64>,
    pub users: usize,
    pub skipped: usize,
    pub config_hash: Option<String>,
    pub checkpoint_hash: Option<String>,
    #[serde(skip)]
    pub per_user: Vec<UserRow>,
}

impl EvalReport {
    pub fn mean(&self, metric: &str, n: usize) -> f64 {
        self.metrics.get(&format!("{metric}@{n}")).copied().unwrap_or(f64::NAN)
    }

    fn from_rows(ns: &[usize], rows: Vec<UserRow>, skipped: usize) -> Self {
        let mut metrics = BTreeMap::new();
        let count = rows.len().max(1) as f64;
        for (j, n) in ns.iter().enumerate() {
            metrics.insert(format!("recall@{n}"), rows.iter().map(|r| r.recall[j]).sum::<f64>() / count);
            metrics.insert(format!("ndcg@{n}"), rows.iter().map(|r| r.ndcg[j]).sum::<f64>() / count);
        }
        Self {
            ns: ns.to_vec(),
            metrics,
            users: rows.len(),
            skipped,
            config_hash: None,
            checkpoint_hash: None,
            per_user: rows,
        }
    }

    /// Per-user table: `user \t targets \t recall@n … \t ndcg@n …`.
    pub fn write_tsv<W: Write>(&self, mut w: W, users: &Vocab) -> std::io::Result<()> {
        write!(w, "user\ttargets")?;
        for n in &self.ns {
            write!(w, "\trecall@{n}")?;
        }
        for n in &self.ns {
            write!(w, "\tndcg@{n}")?;
        }
        writeln!(w)?;
        for row in &self.per_user {
            write!(w, "{}\t{}", users.name(row.user), row.targets)?;
            for v in row.recall.iter().chain(&row.ndcg) {
                write!(w, "\t{v:.6}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Ranks `max(ns)` items per case (history excluded) and scores every cutoff.
pub fn evaluate(rec: &Recommender, cases: &[EvalCase], ns: &[usize], seed: u64, exec: Execution) -> Result<EvalReport> {
    let depth = *ns
        .iter()
        .max()
        .ok_or_else(|| Error::Config("no metric cutoffs".into()))?;
    let rows = exec.map(cases.len(), |i| -> Result<Option<UserRow>> {
        let case = &cases[i];
        let targets: HashSet<usize> = case.targets.iter().copied().collect();
        if targets.is_empty() {
            return Ok(None);
        }
        let eligible = rec.index.len() - case.history.iter().collect::<HashSet<_>>().len();
        let ranked: Vec<usize> = rec
            .recommend(&case.history, depth.min(eligible), &mut Recommender::rng(seed, case.user))?
            .into_iter()
            .map(|s| s.item)
            .collect();
        let mut row = UserRow {
            user: case.user,
            targets: targets.len(),
            recall: Vec::with_capacity(ns.len()),
            ndcg: Vec::with_capacity(ns.len()),
        };
        for &n in ns {
            let n = n.min(ranked.len());
            row.recall.push(recall_at_n(&ranked, &targets, n)?.unwrap_or(0.0));
            row.ndcg.push(ndcg_at_n(&ranked, &targets, n)?.unwrap_or(0.0));
        }
        Ok(Some(row))
    });
    let mut kept = Vec::with_capacity(rows.len());
    let mut skipped = 0;
    for r in rows {
        match r? {
            Some(row) => kept.push(row),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::info!("skipped {skipped} users without targets");
    }
    Ok(EvalReport::from_rows(ns, kept, skipped))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// Mean and sample standard deviation of each metric over repeated runs.
pub fn summarize(reports: &[EvalReport]) -> BTreeMap<String, MeanStd> {
    let mut out = BTreeMap::new();
    let Some(first) = reports.first() else {
        return out;
    };
    for key in first.metrics.keys() {
        let vals: Vec<f64> = reports.iter().filter_map(|r| r.metrics.get(key).copied()).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = if vals.len() > 1 {
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        out.insert(
            key.clone(),
            MeanStd {
                mean,
                std: var.sqrt(),
                runs: vals.len(),
            },
        );
    }
    out
}

/// HR@n of every intermediate state of a full reverse trajectory: entry `s`
/// uses the state after `s` denoising steps (entry 0 is the initial noise).
pub fn intermediate_hit_rates(rec: &Recommender, cases: &[EvalCase], n: usize, seed: u64, exec: Execution) -> Result<Vec<f64>> {
    let steps = rec.config.steps;
    let per_case = exec.map(cases.len(), |i| -> Result<Option<Vec<f64>>> {
        let case = &cases[i];
        let targets: HashSet<usize> = case.targets.iter().copied().collect();
        if targets.is_empty() {
            return Ok(None);
        }
        let exclude: HashSet<usize> = case.history.iter().copied().collect();
        let gen = rec.generate(&case.history, &mut Recommender::rng(seed, case.user), true)?;
        gen.trajectory
            .iter()
            .map(|x| {
                let ranked: Vec<usize> = rec.index.top_n_excluding(x, n, &exclude)?.into_iter().map(|s| s.item).collect();
                Ok(recall_at_n(&ranked, &targets, n)?.unwrap_or(0.0))
            })
            .collect::<Result<Vec<f64>>>()
            .map(Some)
    });
    let mut sums = vec![0.0; steps + 1];
    let mut count = 0usize;
    for r in per_case {
        if let Some(v) = r? {
            sums.iter_mut().zip(&v).for_each(|(s, x)| *s += x);
            count += 1;
        }
    }
    Ok(sums.into_iter().map(|s| s / count.max(1) as f64).collect())
}

/// Ranks with ties sharing their average rank.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut vx, mut vy) = (0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Item → category labels, first label first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CategoryTable {
    labels: HashMap<usize, Vec<String>>,
}

impl CategoryTable {
    pub fn from_labels(labels: HashMap<usize, Vec<String>>) -> Self {
        Self { labels }
    }

    /// Reads `item \t label|label` (TSV) or `id::title::label|label`
    /// (ML-10M `movies.dat`). Items missing from `items` are ignored.
    pub fn read<R: BufRead>(reader: R, origin: &Path, items: &Vocab) -> Result<Self> {
        let mut labels = HashMap::new();
        let mut unknown = 0;
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(origin, e))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, cats) = if line.contains("::") {
                let f: Vec<&str> = line.split("::").collect();
                match (f.first(), f.last()) {
                    (Some(id), Some(cats)) if f.len() >= 3 => (*id, *cats),
                    _ => {
                        return Err(Error::Parse {
                            path: origin.to_path_buf(),
                            line: i + 1,
                            message: "expected id::title::genres".into(),
                        })
                    }
                }
            } else {
                line.split_once('\t').ok_or_else(|| Error::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    message: "expected item<TAB>labels".into(),
                })?
            };
            let cats: Vec<String> = cats.split('|').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect();
            match items.get(id.trim()) {
                Some(item) if !cats.is_empty() => {
                    labels.insert(item, cats);
                }
                Some(_) => {}
                None => unknown += 1,
            }
        }
        if unknown > 0 {
            log::info!("{unknown} category rows name items outside the dataset");
        }
        Ok(Self { labels })
    }

    pub fn labels(&self, item: usize) -> Option<&[String]> {
        self.labels.get(&item).map(Vec::as_slice)
    }

    /// First listed label.
    pub fn primary(&self, item: usize) -> Option<&str> {
        self.labels(item).and_then(|l| l.first()).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub unlabeled: usize,
}

/// Softmax-regression probe on frozen embeddings: items with a label are
/// split 80/20, trained with full-batch gradient descent, and scored by
/// held-out top-1 accuracy. Multi-label items use their first label.
pub fn linear_probe(embeddings: &Tensor, table: &CategoryTable, epochs: usize, lr: f64, seed: u64) -> Result<ProbeResult> {
    let mut class_ids: BTreeMap<&str, usize> = BTreeMap::new();
    let mut rows = Vec::new();
    let mut unlabeled = 0;
    for item in 0..embeddings.rows() {
        match table.primary(item) {
            Some(c) => {
                let next = class_ids.len();
                let id = *class_ids.entry(c).or_insert(next);
                rows.push((item, id));
            }
            None => unlabeled += 1,
        }
    }
    if unlabeled > 0 {
        log::info!("{unlabeled} items without a category are excluded from probing");
    }
    if rows.len() < 2 {
        return Err(Error::Config("probing needs at least two labeled items".into()));
    }
    rows.shuffle(&mut stream(seed, &[0x9b0e]));
    let n_train = ((rows.len() as f64) * 0.8).round().clamp(1.0, (rows.len() - 1) as f64) as usize;
    let (train, test) = rows.split_at(n_train);
    let c = class_ids.len();
    if c < 2 {
        log::warn!("single category: probe accuracy is trivially 1");
        return Ok(ProbeResult {
            accuracy: 1.0,
            classes: c,
            train: train.len(),
            test: test.len(),
            unlabeled,
        });
    }

    let d = embeddings.cols();
    let mut w = vec![0.0; d * c];
    let mut b = vec![0.0; c];
    let probs = |x: &[f64], w: &[f64], b: &[f64]| -> Vec<f64> {
        let logits: Vec<f64> = (0..c).map(|k| b[k] + (0..d).map(|j| x[j] * w[j * c + k]).sum::<f64>()).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    };
    let scale = 1.0 / train.len() as f64;
    for _ in 0..epochs {
        let mut gw = vec![0.0; d * c];
        let mut gb = vec![0.0; c];
        for &(item, y) in train {
            let x = embeddings.row(item);
            let mut p = probs(x, &w, &b);
            p[y] -= 1.0;
            for k in 0..c {
                gb[k] += p[k];
                for j in 0..d {
                    gw[j * c + k] += x[j] * p[k];
                }
            }
        }
        w.iter_mut().zip(&gw).for_each(|(w, g)| *w -= lr * g * scale);
        b.iter_mut().zip(&gb).for_each(|(b, g)| *b -= lr * g * scale);
    }
    let correct = test
        .iter()
        .filter(|&&(item, y)| {
            let p = probs(embeddings.row(item), &w, &b);
            let best = (0..c).fold(0, |best, k| if p[k] > p[best] { k } else { best });
            best == y
        })
        .count();
    Ok(ProbeResult {
        accuracy: correct as f64 / test.len() as f64,
        classes: c,
        train: train.len(),
        test: test.len(),
        unlabeled,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    /// Mean number of distinct categories per list.
    pub mean: f64,
    pub users: usize,
    /// Recommended items without a label, skipped.
    pub missing: usize,
}

/// Distinct categories per recommendation list, averaged over lists.
pub fn category_diversity(lists: &[Vec<usize>], table: &CategoryTable) -> Diversity {
    let mut missing = 0;
    let mut total = 0.0;
    for list in lists {
        if list.len() < 100 {
            log::debug!("diversity list of length {} (< 100)", list.len());
        }
        let mut seen = HashSet::new();
        for item in list {
            match table.labels(*item) {
                Some(l) => seen.extend(l.iter().map(String::as_str)),
                None => missing += 1,
            }
        }
        total += seen.len() as f64;
    }
    Diversity {
        mean: if lists.is_empty() { 0.0 } else { total / lists.len() as f64 },
        users: lists.len(),
        missing,
    }
}
