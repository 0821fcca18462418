//! Clustered synthetic interaction logs with known interest structure.
//!
//! Items are partitioned into equal clusters. Each user mixes a few clusters,
//! stays in the current one with probability `persistence`, and within a
//! cluster picks items by a Zipf-like popularity. A user never repeats an
//! item. The cluster of an item doubles as its category label.

use std::collections::{HashMap, HashSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datapipe::InteractionLog;
use crate::error::{Error, Result};
use crate::evaluation::CategoryTable;
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    /// Inclusive range of clusters mixed per user.
    pub clusters_per_user: (usize, usize),
    /// Inclusive range of sequence lengths.
    pub length: (usize, usize),
    /// Probability of staying in the current cluster between events.
    pub persistence: f64,
    /// Popularity exponent inside a cluster.
    pub zipf: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 5000,
            items: 2000,
            clusters: 8,
            clusters_per_user: (2, 3),
            length: (10, 30),
            persistence: 0.8,
            zipf: 0.8,
        }
    }
}

impl SyntheticConfig {
    /// A small instance for unit tests.
    pub fn tiny() -> Self {
        Self {
            users: 200,
            items: 80,
            clusters: 4,
            length: (8, 16),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.clusters_per_user;
        let cluster_size = self.items / self.clusters.max(1);
        if self.users == 0 || self.clusters == 0 || !self.items.is_multiple_of(self.clusters) {
            return Err(Error::Config("items must split evenly into a positive number of clusters".into()));
        }
        if lo == 0 || lo > hi || hi > self.clusters {
            return Err(Error::Config(format!("clusters per user {lo}..={hi} out of range")));
        }
        if self.length.0 < 2 || self.length.0 > self.length.1 || self.length.1 > lo * cluster_size {
            return Err(Error::Config(format!("sequence lengths {:?} out of range", self.length)));
        }
        if !(0.0..=1.0).contains(&self.persistence) || !(0.0..).contains(&self.zipf) {
            return Err(Error::Config("persistence must be in [0, 1] and zipf non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub log: InteractionLog,
    /// Item index → `cluster<c>`.
    pub categories: CategoryTable,
    /// Per user (log index), the clusters it mixes.
    pub user_clusters: Vec<Vec<usize>>,
}

pub fn generate(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticData> {
    cfg.validate()?;
    let size = cfg.items / cfg.clusters;
    let popularity = WeightedIndex::new((0..size).map(|r| 1.0 / ((r + 1) as f64).powf(cfg.zipf)))
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut records: Vec<(String, String, i64)> = Vec::new();
    let mut user_clusters = Vec::with_capacity(cfg.users);
    let all: Vec<usize> = (0..cfg.clusters).collect();

    for u in 0..cfg.users {
        let mut rng = stream(seed, &[0x5e7, u as u64]);
        let k = rng.random_range(cfg.clusters_per_user.0..=cfg.clusters_per_user.1);
        let mine: Vec<usize> = all.choose_multiple(&mut rng, k).copied().collect();
        let len = rng.random_range(cfg.length.0..=cfg.length.1);
        let mut used = HashSet::new();
        let mut current = *mine.choose(&mut rng).expect("k >= 1");
        for pos in 0..len {
            if pos > 0 && mine.len() > 1 && !rng.random_bool(cfg.persistence) {
                let others: Vec<usize> = mine.iter().copied().filter(|&c| c != current).collect();
                current = *others.choose(&mut rng).expect("another cluster");
            }
            // fall back to another of the user's clusters if this one is used up
            let cluster = if (0..size).all(|r| used.contains(&(current * size + r))) {
                *mine
                    .iter()
                    .find(|&&c| (0..size).any(|r| !used.contains(&(c * size + r))))
                    .expect("length bounded by capacity")
            } else {
                current
            };
            let item = loop {
                let item = cluster * size + popularity.sample(&mut rng);
                if used.insert(item) {
                    break item;
                }
            };
            records.push((format!("u{u}"), format!("i{item}"), pos as i64));
        }
        user_clusters.push(mine);
    }

    let log = InteractionLog::from_records(records.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t)));
    let labels: HashMap<usize, Vec<String>> = (0..cfg.items)
        .filter_map(|raw| {
            log.items
                .get(&format!("i{raw}"))
                .map(|idx| (idx, vec![format!("cluster{}", raw / size)]))
        })
        .collect();
    Ok(SyntheticData {
        log,
        categories: CategoryTable::from_labels(labels),
        user_clusters,
    })
}
