//! Lloyd's k-means with k-means++ seeding and independent restarts.
//!
//! Each restart draws from its own ChaCha stream (`seed`, stream = restart
//! index), so results do not depend on the order in which parallel restarts
//! finish. Iteration stops when assignments stop changing or after
//! `max_iters` assignment/update rounds. A cluster left empty by the
//! assignment step takes the point farthest from its own centroid.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{EmbeddingMap, EmbeddingVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub restarts: usize,
    pub seed: u64,
    pub max_iters: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            k: 10,
            restarts: 10,
            seed: 0,
            max_iters: 100,
        }
    }
}

/// Outcome of a single seeded Lloyd run over a point matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LloydRun {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Inertia after each assignment/update round.
    pub inertia_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// prompt_key -> cluster index
    pub assignments: BTreeMap<String, usize>,
    pub inertia: f64,
    pub restarts_used: usize,
    pub best_restart: usize,
    pub seed: u64,
}

impl ClusterModel {
    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    /// Number of prompts assigned to each cluster.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in self.assignments.values() {
            sizes[c] += 1;
        }
        sizes
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid and its squared distance; ties go to the lower index.
pub fn nearest(centroids: &[Vec<f64>], v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(c, v);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

pub fn inertia(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &c)| squared_distance(p, &centroids[c]))
        .sum()
}

fn kmeans_plus_plus<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap_or(0))
        } else {
            rng.random_range(0..n)
        };
        let chosen = points[pick].clone();
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(squared_distance(p, &chosen));
        }
        centroids.push(chosen);
    }
    centroids
}

fn means(points: &[Vec<f64>], assignments: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignments) {
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|x| *x /= n as f64);
        }
    }
    sums
}

/// Moves, for each empty cluster in index order, the point farthest from its
/// assigned centroid (among clusters that can spare one) into the empty cluster.
fn fill_empty_clusters(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &mut [usize]) {
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    for &c in assignments.iter() {
        counts[c] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            let c = assignments[i];
            if counts[c] < 2 {
                continue;
            }
            let d = squared_distance(p, &centroids[c]);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, _)) = best {
            counts[assignments[i]] -= 1;
            assignments[i] = empty;
            counts[empty] += 1;
        }
    }
}

/// One k-means++ seeded Lloyd run. Requires `1 <= k <= points.len()`.
pub fn lloyd<R: Rng>(points: &[Vec<f64>], k: usize, max_iters: usize, rng: &mut R) -> LloydRun {
    let dim = points[0].len();
    let mut centroids = kmeans_plus_plus(points, k, rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(&centroids, p).0).collect();
        fill_empty_clusters(points, &centroids, &mut next);
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
        centroids = means(points, &assignments, k, dim);
        trace.push(inertia(points, &centroids, &assignments));
    }
    if assignments.is_empty() {
        // max_iters == 0: report the seeding itself.
        assignments = points.iter().map(|p| nearest(&centroids, p).0).collect();
    }
    let total = inertia(points, &centroids, &assignments);
    LloydRun {
        centroids,
        assignments,
        inertia: total,
        iterations: trace.len(),
        converged,
        inertia_trace: trace,
    }
}

fn check_points(points: &[Vec<f64>], params: &KMeansParams) -> Result<()> {
    if params.k < 1 {
        return Err(Error::InvalidClustering("k must be at least 1".into()));
    }
    if params.restarts < 1 {
        return Err(Error::InvalidClustering("restarts must be at least 1".into()));
    }
    if points.len() < params.k {
        return Err(Error::InvalidClustering(format!(
            "{} points cannot form {} clusters",
            points.len(),
            params.k
        )));
    }
    let dim = points[0].len();
    if dim == 0 {
        return Err(Error::InvalidClustering("points have zero dimension".into()));
    }
    if let Some(bad) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: bad.len(),
            key: None,
        });
    }
    Ok(())
}

/// Runs every restart and keeps the lowest-inertia one (earliest on ties).
/// Returns the winning run and its restart index.
pub fn kmeans_points(points: &[Vec<f64>], params: &KMeansParams) -> Result<(LloydRun, usize)> {
    check_points(points, params)?;
    let runs: Vec<LloydRun> = (0..params.restarts)
        .into_par_iter()
        .map(|restart| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(restart as u64);
            lloyd(points, params.k, params.max_iters, &mut rng)
        })
        .collect();
    let (best, _) = runs
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, r)| {
            if r.inertia < bv {
                (i, r.inertia)
            } else {
                (bi, bv)
            }
        });
    let run = runs.into_iter().nth(best).expect("at least one restart");
    Ok((run, best))
}

/// Fits k-means over prompt embeddings, in prompt-key order.
pub fn kmeans_fit(points: &EmbeddingMap, params: &KMeansParams) -> Result<ClusterModel> {
    let keys: Vec<&String> = points.keys().collect();
    let matrix: Vec<Vec<f64>> = points.values().map(|v| v.values.clone()).collect();
    if matrix.is_empty() {
        return Err(Error::InvalidClustering("no points to cluster".into()));
    }
    let (run, best_restart) = kmeans_points(&matrix, params)?;
    Ok(ClusterModel {
        k: params.k,
        assignments: keys
            .into_iter()
            .cloned()
            .zip(run.assignments.iter().copied())
            .collect(),
        centroids: run.centroids,
        inertia: run.inertia,
        restarts_used: params.restarts,
        best_restart,
        seed: params.seed,
    })
}

/// Index of the centroid nearest to `v`.
pub fn assign(model: &ClusterModel, v: &EmbeddingVector) -> Result<usize> {
    if v.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: v.dim(),
            key: Some(v.prompt_key.clone()),
        });
    }
    Ok(nearest(&model.centroids, &v.values).0)
}
