//! Sampling-based KNN clustering.
//!
//! Repeatedly draws a seed from the unassigned rows, scores it against every
//! still-unassigned row and claims the seed plus its `K - 1` most similar
//! neighbours whose cosine exceeds `delta`. The loop ends when every row
//! belongs to exactly one cluster.
//!
//! RNG stream: a `ChaCha8Rng` seeded with `rng_seed`; each iteration consumes
//! exactly one `random_range(0..m)` draw, where `m` is the number of
//! unassigned rows and the candidate list is kept in ascending row order.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{dot, EmbeddingMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("index is empty")]
    EmptyIndex,
    #[error("invalid cluster parameters: {0}")]
    InvalidParams(String),
    #[error("every grid cell failed")]
    AllCellsFailed,
    #[error("grid is empty")]
    EmptyGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub seed_id: usize,
    /// Seed first, then neighbours by descending similarity.
    pub member_ids: Vec<usize>,
    pub similarities: Vec<f64>,
    pub description: Option<String>,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.member_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }

    pub fn contains(&self, para_id: usize) -> bool {
        self.member_ids.contains(&para_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    /// Maximum cluster size, seed included.
    pub k: usize,
    /// Similarity threshold a non-seed member must exceed.
    pub delta: f64,
    pub rng_seed: u64,
}

impl ClusterParams {
    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.k == 0 {
            return Err(ClusterError::InvalidParams("k must be >= 1".into()));
        }
        if !(self.delta >= -1.0 && self.delta < 1.0) {
            return Err(ClusterError::InvalidParams(format!(
                "delta must lie in [-1, 1), got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Below this many multiply-adds per iteration the scan stays sequential.
const PARALLEL_SCAN_WORK: usize = 1 << 18;

pub fn sample_knn_cluster(
    index: &EmbeddingMatrix,
    params: &ClusterParams,
) -> Result<Vec<Cluster>, ClusterError> {
    params.validate()?;
    let n = index.n();
    if n == 0 {
        return Err(ClusterError::EmptyIndex);
    }
    let ids = index.row_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let mut available: Vec<usize> = (0..n).collect();
    let mut assigned = vec![false; n];
    let mut clusters = Vec::new();

    while !available.is_empty() {
        let seed = available[rng.random_range(0..available.len())];
        let z = index.row(seed);
        let score = |&p: &usize| -> Option<(usize, f64)> {
            if p == seed {
                return None;
            }
            // `+ 0.0` folds -0.0 into 0.0 so total_cmp ties fall to the id.
            let s = dot(z, index.row(p)).clamp(-1.0, 1.0) + 0.0;
            (s > params.delta).then_some((p, s))
        };
        let mut candidates: Vec<(usize, f64)> =
            if available.len() * index.d() >= PARALLEL_SCAN_WORK {
                available.par_iter().filter_map(score).collect()
            } else {
                available.iter().filter_map(score).collect()
            };
        let order = |a: &(usize, f64), b: &(usize, f64)| {
            b.1.total_cmp(&a.1).then(ids[a.0].cmp(&ids[b.0]))
        };
        let room = params.k - 1;
        if candidates.len() > room {
            if room > 0 {
                candidates.select_nth_unstable_by(room - 1, order);
            }
            candidates.truncate(room);
        }
        candidates.sort_by(order);

        let mut member_ids = Vec::with_capacity(candidates.len() + 1);
        let mut similarities = Vec::with_capacity(candidates.len() + 1);
        member_ids.push(ids[seed]);
        similarities.push(1.0);
        assigned[seed] = true;
        for (p, s) in candidates {
            member_ids.push(ids[p]);
            similarities.push(s);
            assigned[p] = true;
        }
        available.retain(|&p| !assigned[p]);
        clusters.push(Cluster {
            seed_id: ids[seed],
            member_ids,
            similarities,
            description: None,
        });
    }
    Ok(clusters)
}

/// Diagnostics for a cluster list; empty iff the list is a valid partition
/// that honours `K` and `delta`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub missing: Vec<usize>,
    pub duplicated: Vec<usize>,
    pub unknown: Vec<usize>,
    /// Indices of clusters larger than `K`.
    pub oversize: Vec<usize>,
    /// `(cluster index, para_id, similarity)` of non-seed members at or below `delta`.
    pub sub_threshold: Vec<(usize, usize, f64)>,
    /// Indices of clusters whose records are internally inconsistent.
    pub malformed: Vec<usize>,
}

impl PartitionReport {
    pub fn is_valid(&self) -> bool {
        self.missing.is_empty()
            && self.duplicated.is_empty()
            && self.unknown.is_empty()
            && self.oversize.is_empty()
            && self.sub_threshold.is_empty()
            && self.malformed.is_empty()
    }

    pub fn violation_count(&self) -> usize {
        self.missing.len()
            + self.duplicated.len()
            + self.unknown.len()
            + self.oversize.len()
            + self.sub_threshold.len()
            + self.malformed.len()
    }
}

/// Checks `clusters` against the ids `0..n`.
pub fn validate_partition(clusters: &[Cluster], n: usize, params: &ClusterParams) -> PartitionReport {
    let mut report = PartitionReport::default();
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    for (ci, c) in clusters.iter().enumerate() {
        let consistent = !c.member_ids.is_empty()
            && c.member_ids.len() == c.similarities.len()
            && c.member_ids[0] == c.seed_id
            && c.similarities.windows(2).all(|w| w[0] >= w[1]);
        if !consistent {
            report.malformed.push(ci);
        }
        if c.member_ids.len() > params.k {
            report.oversize.push(ci);
        }
        for (j, &id) in c.member_ids.iter().enumerate() {
            *seen.entry(id).or_default() += 1;
            if id >= n {
                report.unknown.push(id);
            }
            if j > 0 {
                if let Some(&s) = c.similarities.get(j) {
                    if s <= params.delta {
                        report.sub_threshold.push((ci, id, s));
                    }
                }
            }
        }
    }
    report.duplicated = seen.iter().filter(|(_, &c)| c > 1).map(|(&id, _)| id).collect();
    report.missing = (0..n).filter(|id| !seen.contains_key(id)).collect();
    report.unknown.sort_unstable();
    report.unknown.dedup();
    report
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveSpec {
    /// Mean over sampled rows of each row's average cosine to the other
    /// members of its cluster (singletons score 0), computed on a seeded
    /// random sample of `sample_fraction` of the rows.
    MeanIntraClusterSimilarity { sample_fraction: f64, sample_seed: u64 },
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        ObjectiveSpec::MeanIntraClusterSimilarity {
            sample_fraction: 0.1,
            sample_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub params: ClusterParams,
    pub objective: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchOutcome {
    pub best: ClusterParams,
    pub cells: Vec<GridCell>,
}

/// Default grid: `K` in {4, 8, 16} by `delta` in {0.3, 0.5, 0.7}.
pub fn default_grid(rng_seed: u64) -> Vec<ClusterParams> {
    let mut grid = Vec::new();
    for k in [4, 8, 16] {
        for delta in [0.3, 0.5, 0.7] {
            grid.push(ClusterParams { k, delta, rng_seed });
        }
    }
    grid
}

/// Mean over rows of the average cosine to the rest of the row's cluster.
pub fn mean_intra_cluster_similarity(index: &EmbeddingMatrix, clusters: &[Cluster]) -> f64 {
    let n = index.n();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for c in clusters {
        if c.len() < 2 {
            continue;
        }
        let rows: Vec<&[f64]> = c
            .member_ids
            .iter()
            .map(|&id| index.vector(id).expect("cluster member in index"))
            .collect();
        for (i, a) in rows.iter().enumerate() {
            let s: f64 = rows
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| dot(a, b))
                .sum();
            total += s / (rows.len() - 1) as f64;
        }
    }
    total / n as f64
}

/// Row positions used to score the grid.
pub fn objective_sample(n: usize, objective: &ObjectiveSpec) -> Vec<usize> {
    let ObjectiveSpec::MeanIntraClusterSimilarity {
        sample_fraction,
        sample_seed,
    } = *objective;
    if sample_fraction >= 1.0 || n <= 2 {
        return (0..n).collect();
    }
    let m = ((sample_fraction * n as f64).ceil() as usize).clamp(2.min(n), n);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut picked = index::sample(&mut rng, n, m).into_vec();
    picked.sort_unstable();
    picked
}

pub fn evaluate_cell(
    index: &EmbeddingMatrix,
    params: &ClusterParams,
    objective: &ObjectiveSpec,
) -> Result<f64, ClusterError> {
    let sub = index.select(&objective_sample(index.n(), objective));
    let clusters = sample_knn_cluster(&sub, params)?;
    Ok(mean_intra_cluster_similarity(&sub, &clusters))
}

/// Picks the grid cell with the highest objective; ties go to the smaller
/// `K`, then the larger `delta`. Failed cells are recorded and skipped.
pub fn grid_search_params(
    index: &EmbeddingMatrix,
    grid: &[ClusterParams],
    objective: &ObjectiveSpec,
) -> Result<GridSearchOutcome, ClusterError> {
    if grid.is_empty() {
        return Err(ClusterError::EmptyGrid);
    }
    if index.is_empty() {
        return Err(ClusterError::EmptyIndex);
    }
    let cells: Vec<GridCell> = grid
        .par_iter()
        .map(|p| match evaluate_cell(index, p, objective) {
            Ok(v) => GridCell {
                params: *p,
                objective: Some(v),
                error: None,
            },
            Err(e) => GridCell {
                params: *p,
                objective: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    for c in &cells {
        match (c.objective, &c.error) {
            (Some(v), _) => log::info!("grid K={} delta={} objective={v:.6}", c.params.k, c.params.delta),
            (None, Some(e)) => log::warn!("grid K={} delta={} failed: {e}", c.params.k, c.params.delta),
            _ => {}
        }
    }
    let best = cells
        .iter()
        .filter_map(|c| c.objective.map(|v| (v, c.params)))
        .max_by(|(va, pa), (vb, pb)| {
            va.total_cmp(vb)
                .then(pb.k.cmp(&pa.k))
                .then(pa.delta.total_cmp(&pb.delta))
        })
        .map(|(_, p)| p)
        .ok_or(ClusterError::AllCellsFailed)?;
    Ok(GridSearchOutcome { best, cells })
}

/// Para ids in the cluster at `cluster_index`, as a set.
pub fn member_set(cluster: &Cluster) -> BTreeSet<usize> {
    cluster.member_ids.iter().copied().collect()
}
