//! K-means partitioning of the semantic space into expert clusters.
//!
//! Lloyd iterations from a seeded k-means++ start. The assignment step runs
//! in parallel over points; centroid sums are accumulated in row order so the
//! worker count never changes a result bit.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{squared_distance, write_vectors, CorpusMatrix, EmbeddingTable};
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 6;
pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    /// Cluster index per matrix row.
    pub assignments: Vec<usize>,
    /// Record id per matrix row.
    pub ids: Vec<String>,
    pub centroids: Vec<Vec<f64>>,
    pub wcss: f64,
    /// Objective after each completed update step.
    pub wcss_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ClusterModel {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|&(_, &c)| c == cluster)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in &self.assignments {
            sizes[c] += 1;
        }
        sizes
    }

    /// Recomputes centroids as exact member means over `matrix` (used after
    /// loading, since persisted centroids are stored as `f32`).
    pub fn recompute_centroids(&mut self, matrix: &CorpusMatrix) -> Result<()> {
        self.check_alignment(matrix)?;
        let (centroids, _) = member_means(matrix, &self.assignments, self.k);
        for (c, mean) in centroids.into_iter().enumerate() {
            self.centroids[c] = mean.ok_or_else(|| Error::invalid(format!("cluster {c} is empty")))?;
        }
        self.wcss = objective(matrix, &self.assignments, &self.centroids);
        Ok(())
    }

    fn check_alignment(&self, matrix: &CorpusMatrix) -> Result<()> {
        if matrix.ids() != self.ids.as_slice() {
            return Err(Error::invalid(
                "cluster assignments are not aligned with the corpus matrix",
            ));
        }
        Ok(())
    }

    pub fn save(&self, json_path: &Path, centroid_path: &Path) -> Result<()> {
        let doc = PersistedModel {
            k: self.k,
            wcss: self.wcss,
            iterations: self.iterations,
            converged: self.converged,
            wcss_history: self.wcss_history.clone(),
            assignments: self
                .ids
                .iter()
                .zip(&self.assignments)
                .map(|(id, &cluster)| Assignment {
                    id: id.clone(),
                    cluster,
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&doc)?;
        std::fs::write(json_path, text).map_err(|e| Error::io(json_path, e))?;
        let ids: Vec<String> = (0..self.k).map(|c| format!("centroid-{c}")).collect();
        let rows: Vec<&[f64]> = self.centroids.iter().map(Vec::as_slice).collect();
        let d = rows.first().map_or(0, |r| r.len());
        write_vectors(centroid_path, &ids, &rows, d)
    }

    pub fn load(json_path: &Path, centroid_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
        let doc: PersistedModel = serde_json::from_str(&text)?;
        let table = EmbeddingTable::load_binary(centroid_path)?;
        let centroids: Vec<Vec<f64>> = (0..doc.k)
            .map(|c| {
                table
                    .get(&format!("centroid-{c}"))
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| Error::Format(format!("centroid {c} missing")))
            })
            .collect::<Result<_>>()?;
        if let Some(a) = doc.assignments.iter().find(|a| a.cluster >= doc.k) {
            return Err(Error::Format(format!(
                "{:?} assigned to cluster {} but k = {}",
                a.id, a.cluster, doc.k
            )));
        }
        Ok(Self {
            k: doc.k,
            ids: doc.assignments.iter().map(|a| a.id.clone()).collect(),
            assignments: doc.assignments.iter().map(|a| a.cluster).collect(),
            centroids,
            wcss: doc.wcss,
            wcss_history: doc.wcss_history,
            iterations: doc.iterations,
            converged: doc.converged,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Assignment {
    id: String,
    cluster: usize,
}

#[derive(Serialize, Deserialize)]
struct PersistedModel {
    k: usize,
    wcss: f64,
    iterations: usize,
    converged: bool,
    wcss_history: Vec<f64>,
    assignments: Vec<Assignment>,
}

/// Component-wise mean of a non-empty list of equal-length vectors.
pub fn centroid<V: AsRef<[f64]>>(points: &[V]) -> Result<Vec<f64>> {
    let first = points
        .first()
        .ok_or_else(|| Error::invalid("centroid of an empty point set"))?;
    let d = first.as_ref().len();
    let mut sum = vec![0.0; d];
    for (i, p) in points.iter().enumerate() {
        let p = p.as_ref();
        if p.len() != d {
            return Err(Error::DimensionMismatch {
                id: format!("point {i}"),
                expected: d,
                actual: p.len(),
            });
        }
        for (s, x) in sum.iter_mut().zip(p) {
            *s += x;
        }
    }
    let n = points.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d = squared_distance(point, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn member_means(
    matrix: &CorpusMatrix,
    assignments: &[usize],
    k: usize,
) -> (Vec<Option<Vec<f64>>>, Vec<usize>) {
    let d = matrix.dim();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (i, &c) in assignments.iter().enumerate() {
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(matrix.row(i)) {
            *s += x;
        }
    }
    let means = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|x| x / n as f64).collect()))
        .collect();
    (means, counts)
}

fn objective(matrix: &CorpusMatrix, assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    let per_point: Vec<f64> = (0..matrix.n())
        .into_par_iter()
        .map(|i| squared_distance(matrix.row(i), &centroids[assignments[i]]))
        .collect();
    per_point.iter().sum()
}

fn kmeans_plus_plus(matrix: &CorpusMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = matrix.n();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centers = vec![matrix.row(first).to_vec()];
    let mut d2: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| squared_distance(matrix.row(i), &centers[0]))
        .collect();
    while centers.len() < k {
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
            // Rounding can leave `target` just above the final partial sum.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            chosen.iter().position(|&c| !c).expect("k <= n")
        };
        chosen[pick] = true;
        let center = matrix.row(pick).to_vec();
        d2.par_iter_mut().enumerate().for_each(|(i, best)| {
            let d = squared_distance(matrix.row(i), &center);
            if d < *best {
                *best = d;
            }
        });
        centers.push(center);
    }
    centers
}

/// Moves the point farthest from its own centroid into each empty cluster.
fn repair_empty_clusters(
    matrix: &CorpusMatrix,
    assignments: &mut [usize],
    centroids: &[Vec<f64>],
    k: usize,
) -> usize {
    let mut counts = vec![0usize; k];
    for &c in assignments.iter() {
        counts[c] += 1;
    }
    let mut repaired = 0;
    let mut dist: Vec<f64> = (0..matrix.n())
        .into_par_iter()
        .map(|i| squared_distance(matrix.row(i), &centroids[assignments[i]]))
        .collect();
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, &d) in dist.iter().enumerate() {
            if counts[assignments[i]] > 1 && best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let Some((i, _)) = best else { break };
        counts[assignments[i]] -= 1;
        assignments[i] = empty;
        counts[empty] = 1;
        dist[i] = 0.0;
        repaired += 1;
    }
    repaired
}

/// Seeded k-means++ followed by Lloyd iterations.
///
/// Stops when the largest centroid shift drops below `tol`, when assignments
/// stop changing, or after `max_iter` update steps.
pub fn kmeans(
    matrix: &CorpusMatrix,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterModel> {
    let n = matrix.n();
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds the {n} available points")));
    }
    if max_iter == 0 {
        return Err(Error::invalid("max_iter must be positive"));
    }
    if !(tol >= 0.0) {
        return Err(Error::invalid("tol must be non-negative"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(matrix, k, &mut rng);
    let mut assignments: Vec<usize> = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        let mut next: Vec<usize> = (0..n)
            .into_par_iter()
            .map(|i| nearest(matrix.row(i), &centroids).0)
            .collect();
        let repaired = repair_empty_clusters(matrix, &mut next, &centroids, k);
        if repaired > 0 {
            log::debug!("k-means iteration {iterations}: reseeded {repaired} empty cluster(s)");
        }
        let unchanged = next == assignments;
        assignments = next;

        let (means, _) = member_means(matrix, &assignments, k);
        let mut shift: f64 = 0.0;
        for (c, mean) in means.into_iter().enumerate() {
            let mean = mean.expect("repair leaves no empty cluster");
            shift = shift.max(squared_distance(&mean, &centroids[c]).sqrt());
            centroids[c] = mean;
        }
        history.push(objective(matrix, &assignments, &centroids));
        if unchanged || shift < tol {
            converged = true;
            break;
        }
    }

    Ok(ClusterModel {
        k,
        wcss: *history.last().expect("at least one iteration"),
        assignments,
        ids: matrix.ids().to_vec(),
        centroids,
        wcss_history: history,
        iterations,
        converged,
    })
}
