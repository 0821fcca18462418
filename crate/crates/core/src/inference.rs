//! Serving: reverse-process generation of the user embedding and top-N
//! retrieval over the item pool.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dam::denoise_values;
use crate::diffusion::{reverse_step, NoiseSchedule, NoiseScale};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gem::GuidanceSequence;
use crate::model::ModelParams;
use crate::numerics::{dot, normalized, Tensor};
use crate::rng::{gaussian_vec, stream, Rng};

/// Brute-force inner-product index over raw item embeddings.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    items: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub item: usize,
    pub score: f64,
}

/// Descending score, lower id first on ties.
fn rank_order(a: &Scored, b: &Scored) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then(a.item.cmp(&b.item))
}

impl RetrievalIndex {
    pub fn new(items: Tensor) -> Result<Self> {
        if items.shape().len() != 2 || items.rows() == 0 {
            return Err(Error::Contract(format!("empty retrieval index {:?}", items.shape())));
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.items.cols()
    }

    pub fn score(&self, query: &[f64], item: usize) -> f64 {
        dot(query, self.items.row(item))
    }

    /// Largest `max_k q_k·e_i` over the rows of `queries`, for every item.
    fn scores(&self, queries: &Tensor) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                let e = self.items.row(i);
                (0..queries.rows())
                    .map(|k| dot(queries.row(k), e))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    fn rank(&self, queries: &Tensor, n: usize, exclude: &HashSet<usize>) -> Result<Vec<Scored>> {
        if queries.cols() != self.dim() {
            return Err(Error::Shape {
                op: "retrieval",
                lhs: queries.shape().to_vec(),
                rhs: self.items.shape().to_vec(),
            });
        }
        let available = self.len() - exclude.iter().filter(|&&i| i < self.len()).count();
        if n > available {
            return Err(Error::Contract(format!(
                "asked for {n} items but only {available} are eligible"
            )));
        }
        let mut scored: Vec<Scored> = self
            .scores(queries)
            .into_iter()
            .enumerate()
            .filter(|(i, _)| !exclude.contains(i))
            .map(|(item, score)| Scored { item, score })
            .collect();
        if n < scored.len() {
            scored.select_nth_unstable_by(n, rank_order);
            scored.truncate(n);
        }
        scored.sort_by(rank_order);
        Ok(scored)
    }

    /// The `n` items with the largest `query·e_i`, descending.
    pub fn top_n(&self, query: &[f64], n: usize) -> Result<Vec<Scored>> {
        self.rank(&Tensor::new(vec![1, query.len()], query.to_vec())?, n, &HashSet::new())
    }

    /// Like [`top_n`](Self::top_n) but skipping `exclude`.
    pub fn top_n_excluding(&self, query: &[f64], n: usize, exclude: &HashSet<usize>) -> Result<Vec<Scored>> {
        self.rank(&Tensor::new(vec![1, query.len()], query.to_vec())?, n, exclude)
    }

    /// Multi-interest retrieval: each item is scored by its best interest.
    pub fn top_n_multi(&self, queries: &Tensor, n: usize, exclude: &HashSet<usize>) -> Result<Vec<Scored>> {
        self.rank(queries, n, exclude)
    }
}

/// Which query drives retrieval.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    /// The generated user embedding.
    #[default]
    Diffusion,
    /// The extracted interests directly, merged by best score per item.
    Guidance,
}

impl std::str::FromStr for RetrievalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffusion" => Ok(Self::Diffusion),
            "guidance" => Ok(Self::Guidance),
            other => Err(Error::Config(format!("unknown retrieval mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServeConfig {
    /// Reverse steps to run, `1..=T`.
    pub steps: usize,
    pub noise_scale: NoiseScale,
    /// Keep reverse states on the unit sphere.
    pub spherical: bool,
    pub mode: RetrievalMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// The final state `x_0`.
    pub embedding: Vec<f64>,
    /// `x_s, x_{s−1}, …, x_0` when requested.
    pub trajectory: Vec<Vec<f64>>,
    pub denoiser_calls: usize,
}

/// Runs the reverse process from a (normalized) Gaussian `x_s` down to
/// `x_0`, conditioned on `guidance`, which is computed once by the caller.
#[allow(clippy::too_many_arguments)]
pub fn generate_user_embedding(
    params: &ModelParams,
    schedule: &NoiseSchedule,
    guidance: &Tensor,
    steps: usize,
    spherical: bool,
    noise_scale: NoiseScale,
    rng: &mut Rng,
    keep_trajectory: bool,
) -> Result<Generation> {
    if steps == 0 || steps > schedule.steps() {
        return Err(Error::Config(format!(
            "steps must be in 1..={}, got {steps}",
            schedule.steps()
        )));
    }
    let d = params.config.dim;
    let mut x = gaussian_vec(rng, d);
    if spherical {
        x = normalized(&x)?;
    }
    let mut trajectory = Vec::new();
    if keep_trajectory {
        trajectory.push(x.clone());
    }
    let mut calls = 0;
    for t in (1..=steps).rev() {
        let out = denoise_values(params, &x, t, guidance, spherical)?;
        calls += 1;
        x = reverse_step(&x, &out.x0_hat, t, schedule, rng, spherical, noise_scale)?;
        if keep_trajectory {
            trajectory.push(x.clone());
        }
    }
    Ok(Generation {
        embedding: x,
        trajectory,
        denoiser_calls: calls,
    })
}

/// Trained parameters, schedule and index bundled for serving.
#[derive(Clone, Debug)]
pub struct Recommender<'a> {
    pub params: &'a ModelParams,
    pub schedule: &'a NoiseSchedule,
    pub index: RetrievalIndex,
    pub config: ServeConfig,
}

impl<'a> Recommender<'a> {
    pub fn new(params: &'a ModelParams, schedule: &'a NoiseSchedule, config: ServeConfig) -> Result<Self> {
        if config.steps == 0 || config.steps > schedule.steps() {
            return Err(Error::Config(format!(
                "steps must be in 1..={}, got {}",
                schedule.steps(),
                config.steps
            )));
        }
        Ok(Self {
            params,
            schedule,
            index: RetrievalIndex::new(params.item_embedding.clone())?,
            config,
        })
    }

    /// Per-user generation stream.
    pub fn rng(seed: u64, user: usize) -> Rng {
        stream(seed, &[0x1fe4, user as u64])
    }

    /// Guidance from the latest `max_len` items of `history`.
    pub fn guidance(&self, history: &[usize]) -> Result<GuidanceSequence> {
        let start = history.len().saturating_sub(self.params.config.max_len);
        GuidanceSequence::extract(self.params, &history[start..])
    }

    pub fn generate(&self, history: &[usize], rng: &mut Rng, keep_trajectory: bool) -> Result<Generation> {
        let g = self.guidance(history)?;
        generate_user_embedding(
            self.params,
            self.schedule,
            &g.g,
            self.config.steps,
            self.config.spherical,
            self.config.noise_scale,
            rng,
            keep_trajectory,
        )
    }

    /// Top `n` items outside `history`.
    pub fn recommend(&self, history: &[usize], n: usize, rng: &mut Rng) -> Result<Vec<Scored>> {
        let exclude: HashSet<usize> = history.iter().copied().collect();
        let eligible = self.index.len() - exclude.iter().filter(|&&i| i < self.index.len()).count();
        if n > eligible {
            return Err(Error::Contract(format!(
                "asked for {n} items but the history leaves {eligible}"
            )));
        }
        match self.config.mode {
            RetrievalMode::Diffusion => {
                let e_u = self.generate(history, rng, false)?.embedding;
                self.index.top_n_excluding(&e_u, n, &exclude)
            }
            RetrievalMode::Guidance => {
                let g = self.guidance(history)?;
                self.index.top_n_multi(&g.g, n, &exclude)
            }
        }
    }

    /// Recommendations for many `(user, history)` pairs; user `u` draws from
    /// `Recommender::rng(seed, u)`.
    pub fn recommend_batch(
        &self,
        requests: &[(String, Vec<usize>)],
        n: usize,
        seed: u64,
        exec: Execution,
    ) -> Result<Vec<Vec<Scored>>> {
        exec.map(requests.len(), |i| self.recommend(&requests[i].1, n, &mut Self::rng(seed, i)))
            .into_iter()
            .collect()
    }
}

/// Reads `user \t item \t item …` lines.
pub fn read_histories<R: BufRead>(
    reader: R,
    origin: &Path,
    items: &crate::datapipe::Vocab,
) -> Result<Vec<(String, Vec<usize>)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let user = fields.next().unwrap_or_default().to_string();
        let mut hist = Vec::new();
        for f in fields.flat_map(|f| f.split(',')).map(str::trim).filter(|f| !f.is_empty()) {
            match items.get(f) {
                Some(id) => hist.push(id),
                None => log::warn!("{}:{}: unknown item `{f}` skipped", origin.display(), i + 1),
            }
        }
        if hist.is_empty() {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: "history has no known items".into(),
            });
        }
        out.push((user, hist));
    }
    Ok(out)
}

/// Writes `user \t rank \t item \t score` rows, ranks starting at 1.
pub fn write_recommendations<W: Write>(
    mut w: W,
    requests: &[(String, Vec<usize>)],
    results: &[Vec<Scored>],
    items: &crate::datapipe::Vocab,
) -> std::io::Result<()> {
    writeln!(w, "user\trank\titem\tscore")?;
    for ((user, _), recs) in requests.iter().zip(results) {
        for (r, s) in recs.iter().enumerate() {
            writeln!(w, "{user}\t{}\t{}\t{:.6}", r + 1, items.name(s.item), s.score)?;
        }
    }
    Ok(())
}
