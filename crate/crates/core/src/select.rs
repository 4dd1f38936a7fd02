//! Per-cluster, per-source fractional selection of unified pairs.
//!
//! Every (cluster, source) stratum keeps `ceil(f * n)` pairs: the top ones by
//! quality for `quality` sources, a seeded shuffle prefix for `random`
//! sources. `passthrough` strata are kept whole. Kept pairs are emitted in
//! their original order with `cluster_id` filled in.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::cluster::KMeansParams;
use crate::embed::prompt_key;
use crate::error::{Error, Result};
use crate::ingest::FilterPolicy;
use crate::unify::UnifiedPair;

fn default_k() -> usize {
    10
}

fn default_restarts() -> usize {
    10
}

fn default_max_iters() -> usize {
    100
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub fraction: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
}

impl SelectionConfig {
    pub fn new(fraction: f64) -> Self {
        SelectionConfig {
            fraction,
            k: default_k(),
            restarts: default_restarts(),
            seed: 0,
            max_iters: default_max_iters(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::InvalidFraction(self.fraction));
        }
        if self.k < 1 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.restarts < 1 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn kmeans_params(&self) -> KMeansParams {
        KMeansParams {
            k: self.k,
            restarts: self.restarts,
            seed: self.seed,
            max_iters: self.max_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumCount {
    pub cluster: usize,
    pub source_id: String,
    pub policy: FilterPolicy,
    pub input: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterCount {
    pub cluster: usize,
    pub input: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSelectionCount {
    pub source_id: String,
    pub input: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub fraction: f64,
    pub input_total: usize,
    pub kept_total: usize,
    /// kept_total / input_total. Exceeds `fraction` when passthrough sources exist.
    pub achieved_fraction: f64,
    pub clusters: Vec<ClusterCount>,
    pub sources: Vec<SourceSelectionCount>,
    pub strata: Vec<StratumCount>,
}

/// `ceil(fraction * n)`, treating products within rounding noise of an
/// integer as that integer (0.7 * 10 is 7, not 8).
pub fn kept_count(fraction: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let exact = fraction * n as f64;
    let nearest = exact.round();
    let m = if (exact - nearest).abs() <= 1e-9 * exact.max(1.0) {
        nearest
    } else {
        exact.ceil()
    };
    (m as usize).clamp(1, n)
}

/// Fills `cluster_id` on every pair from its prompt's assignment.
pub fn annotate_clusters(pairs: &mut [UnifiedPair], assignments: &BTreeMap<String, usize>) -> Result<()> {
    for pair in pairs {
        let cluster = *assignments
            .get(&prompt_key(&pair.prompt))
            .ok_or_else(|| Error::UnassignedPrompt {
                pair_id: pair.pair_id.clone(),
            })?;
        pair.cluster_id = Some(cluster);
    }
    Ok(())
}

fn stratum_rng(seed: u64, cluster: usize, source_id: &str) -> ChaCha8Rng {
    let tag = format!("{cluster}\u{1f}{source_id}");
    ChaCha8Rng::seed_from_u64(xxh3_64_with_seed(tag.as_bytes(), seed))
}

pub fn select_pairs(
    pairs: &[UnifiedPair],
    assignments: &BTreeMap<String, usize>,
    cfg: &SelectionConfig,
    policies: &HashMap<String, FilterPolicy>,
) -> Result<(Vec<UnifiedPair>, SelectionReport)> {
    if !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
        return Err(Error::InvalidFraction(cfg.fraction));
    }
    let mut annotated = pairs.to_vec();
    annotate_clusters(&mut annotated, assignments)?;

    let mut source_order: Vec<&str> = Vec::new();
    let mut strata: BTreeMap<(usize, &str), Vec<usize>> = BTreeMap::new();
    for (i, pair) in annotated.iter().enumerate() {
        if !policies.contains_key(&pair.source_id) {
            return Err(Error::UnknownPolicy(pair.source_id.clone()));
        }
        if !source_order.contains(&pair.source_id.as_str()) {
            source_order.push(&pair.source_id);
        }
        let cluster = pair.cluster_id.expect("annotated");
        strata.entry((cluster, &pair.source_id)).or_default().push(i);
    }

    let mut keep = vec![false; annotated.len()];
    let mut stratum_counts = Vec::with_capacity(strata.len());
    for (&(cluster, source_id), members) in &strata {
        let policy = policies[source_id];
        let chosen: Vec<usize> = match policy {
            FilterPolicy::Passthrough => members.clone(),
            FilterPolicy::Quality => {
                let mut ranked = members
                    .iter()
                    .map(|&i| {
                        annotated[i].quality.map(|q| (q, i)).ok_or_else(|| Error::MissingQuality {
                            pair_id: annotated[i].pair_id.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
                ranked
                    .into_iter()
                    .take(kept_count(cfg.fraction, members.len()))
                    .map(|(_, i)| i)
                    .collect()
            }
            FilterPolicy::Random => {
                let mut shuffled = members.clone();
                shuffled.shuffle(&mut stratum_rng(cfg.seed, cluster, source_id));
                shuffled.truncate(kept_count(cfg.fraction, members.len()));
                shuffled
            }
        };
        for &i in &chosen {
            keep[i] = true;
        }
        stratum_counts.push(StratumCount {
            cluster,
            source_id: source_id.to_owned(),
            policy,
            input: members.len(),
            kept: chosen.len(),
        });
    }

    let mut clusters: BTreeMap<usize, ClusterCount> = BTreeMap::new();
    for s in &stratum_counts {
        let entry = clusters.entry(s.cluster).or_insert(ClusterCount {
            cluster: s.cluster,
            input: 0,
            kept: 0,
        });
        entry.input += s.input;
        entry.kept += s.kept;
    }
    let sources = source_order
        .iter()
        .map(|&id| {
            let (input, kept) = stratum_counts
                .iter()
                .filter(|s| s.source_id == id)
                .fold((0, 0), |(i, k), s| (i + s.input, k + s.kept));
            SourceSelectionCount {
                source_id: id.to_owned(),
                input,
                kept,
            }
        })
        .collect();

    let selected: Vec<UnifiedPair> = annotated
        .into_iter()
        .zip(&keep)
        .filter_map(|(p, &k)| k.then_some(p))
        .collect();
    let input_total = pairs.len();
    let report = SelectionReport {
        fraction: cfg.fraction,
        input_total,
        kept_total: selected.len(),
        achieved_fraction: if input_total == 0 {
            1.0
        } else {
            selected.len() as f64 / input_total as f64
        },
        clusters: clusters.into_values().collect(),
        sources,
        strata: stratum_counts,
    };
    Ok((selected, report))
}
