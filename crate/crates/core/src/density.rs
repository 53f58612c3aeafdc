//! Adaptive density clustering (A-DBSCAN) inside one K-means cluster, and the
//! balanced stage-1 sample drawn from the resulting sub-clusters.
//!
//! Local density is the reciprocal of the mean distance to the `k` nearest
//! neighbours. Points are visited from the densest down; the neighbourhood
//! radius is the median k-th-neighbour distance and the core-point threshold
//! starts at `max(2, eps * rho_max / 2)`, then shrinks after every formed
//! sub-cluster in proportion to the density of the next unvisited point.
//!
//! All indices in this module refer to positions in the `points` slice the
//! caller passed in.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::distance;
use crate::error::{Error, Result};

pub const DEFAULT_KNN_K: usize = 20;
pub const MIN_MINPTS: f64 = 2.0;

const PARALLEL_SCAN_THRESHOLD: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityInfo {
    pub k: usize,
    /// Ascending distances to the `k` nearest neighbours (self excluded).
    pub knn_dists: Vec<Vec<f64>>,
    pub rho: Vec<f64>,
    pub rho_max: f64,
    /// Points whose mean neighbour distance was zero. Their density is set
    /// to the largest finite density among the remaining points.
    pub duplicates: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdbscanParams {
    pub k: usize,
    pub epsilon: f64,
    pub minpts_init: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubCluster {
    pub members: Vec<usize>,
    pub seed: usize,
    pub seed_rho: f64,
}

impl SubCluster {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct AdbscanOutcome {
    pub subclusters: Vec<SubCluster>,
    pub noise: Vec<usize>,
    pub params: AdbscanParams,
    /// Core-point threshold in force when each sub-cluster was formed.
    pub minpts_schedule: Vec<f64>,
    pub density: DensityInfo,
}

fn k_smallest(mut dists: Vec<f64>, k: usize) -> Vec<f64> {
    dists.select_nth_unstable_by(k - 1, f64::total_cmp);
    dists.truncate(k);
    dists.sort_by(f64::total_cmp);
    dists
}

/// Exact k-nearest-neighbour distances and local densities.
pub fn knn_density(points: &[&[f64]], k: usize) -> Result<DensityInfo> {
    let n = points.len();
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if k >= n {
        return Err(Error::invalid(format!(
            "k = {k} needs at least {} points, got {n}",
            k + 1
        )));
    }
    let knn_dists: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let dists: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| distance(points[i], points[j]))
                .collect();
            k_smallest(dists, k)
        })
        .collect();

    let mut rho: Vec<f64> = knn_dists
        .iter()
        .map(|d| {
            let mean = d.iter().sum::<f64>() / k as f64;
            1.0 / mean
        })
        .collect();
    let duplicates: Vec<usize> = (0..n).filter(|&i| !rho[i].is_finite()).collect();
    if !duplicates.is_empty() {
        let finite_max = rho
            .iter()
            .copied()
            .filter(|r| r.is_finite())
            .fold(f64::NEG_INFINITY, f64::max);
        let fill = if finite_max.is_finite() { finite_max } else { 1.0 };
        log::warn!(
            "{} point(s) have zero mean neighbour distance; assigning density {fill}",
            duplicates.len()
        );
        for &i in &duplicates {
            rho[i] = fill;
        }
    }
    let rho_max = rho.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(DensityInfo {
        k,
        knn_dists,
        rho,
        rho_max,
        duplicates,
    })
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

pub fn minpts_init(epsilon: f64, rho_max: f64) -> f64 {
    (epsilon * rho_max / 2.0).max(MIN_MINPTS)
}

/// Threshold for the next sub-cluster, scaled from the initial value by the
/// density of the current queue head.
pub fn minpts_update(rho_current: f64, rho_max: f64, minpts: f64) -> f64 {
    (rho_current / rho_max * minpts).max(MIN_MINPTS)
}

/// Neighbourhood radius (median k-th-neighbour distance) and initial
/// core-point threshold.
pub fn compute_params(density: &DensityInfo) -> Result<AdbscanParams> {
    if density.knn_dists.is_empty() {
        return Err(Error::invalid("no points to derive parameters from"));
    }
    let mut kth: Vec<f64> = density
        .knn_dists
        .iter()
        .map(|d| *d.last().expect("k >= 1"))
        .collect();
    let epsilon = median(&mut kth);
    if !(epsilon > 0.0) {
        return Err(Error::invalid(
            "median k-th neighbour distance is zero; too many duplicate points",
        ));
    }
    Ok(AdbscanParams {
        k: density.k,
        epsilon,
        minpts_init: minpts_init(epsilon, density.rho_max),
    })
}

/// Processing order: density descending, ties by index.
pub fn priority_queue(rho: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rho.len()).collect();
    order.sort_by(|&a, &b| rho[b].total_cmp(&rho[a]).then(a.cmp(&b)));
    order
}

fn neighborhood(points: &[&[f64]], p: usize, epsilon: f64) -> Vec<usize> {
    let within = |j: &usize| distance(points[p], points[*j]) <= epsilon;
    if points.len() >= PARALLEL_SCAN_THRESHOLD {
        (0..points.len()).into_par_iter().filter(within).collect()
    } else {
        (0..points.len()).filter(within).collect()
    }
}

fn meets(count: usize, minpts: f64) -> bool {
    count as f64 >= minpts.ceil()
}

/// Runs A-DBSCAN with density and parameters computed from the points.
pub fn adbscan(points: &[&[f64]], k: usize) -> Result<AdbscanOutcome> {
    let density = knn_density(points, k)?;
    let params = compute_params(&density)?;
    adbscan_with(points, density, params)
}

/// Runs the clustering loop with caller-supplied density and parameters.
///
/// Neighbourhoods include the point itself. A sub-cluster grows from an
/// unvisited core point by scanning its neighbourhood list, appending the
/// neighbourhoods of further core points; every scanned point not yet owned
/// by a sub-cluster joins it.
pub fn adbscan_with(
    points: &[&[f64]],
    density: DensityInfo,
    params: AdbscanParams,
) -> Result<AdbscanOutcome> {
    let n = points.len();
    if density.rho.len() != n {
        return Err(Error::invalid("density does not match the point set"));
    }
    if !(params.epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let queue = priority_queue(&density.rho);
    let mut visited = vec![false; n];
    let mut owned = vec![false; n];
    let mut queued = vec![false; n];
    let mut minpts = params.minpts_init;
    let mut subclusters = Vec::new();
    let mut schedule = Vec::new();
    let mut head = 0;

    while head < n {
        let p = queue[head];
        head += 1;
        if visited[p] {
            continue;
        }
        visited[p] = true;
        let mut frontier = neighborhood(points, p, params.epsilon);
        if !meets(frontier.len(), minpts) {
            continue;
        }
        for &q in &frontier {
            queued[q] = true;
        }
        let mut members = vec![p];
        owned[p] = true;
        let mut cursor = 0;
        while cursor < frontier.len() {
            let q = frontier[cursor];
            cursor += 1;
            if !visited[q] {
                visited[q] = true;
                let nq = neighborhood(points, q, params.epsilon);
                if meets(nq.len(), minpts) {
                    for r in nq {
                        if !queued[r] {
                            queued[r] = true;
                            frontier.push(r);
                        }
                    }
                }
            }
            if !owned[q] {
                owned[q] = true;
                members.push(q);
            }
        }
        for &q in &frontier {
            queued[q] = false;
        }
        schedule.push(minpts);
        subclusters.push(SubCluster {
            members,
            seed: p,
            seed_rho: density.rho[p],
        });
        while head < n && visited[queue[head]] {
            head += 1;
        }
        if head < n {
            minpts = minpts_update(density.rho[queue[head]], density.rho_max, params.minpts_init);
        }
    }

    let noise = (0..n).filter(|&i| !owned[i]).collect();
    Ok(AdbscanOutcome {
        subclusters,
        noise,
        params,
        minpts_schedule: schedule,
        density,
    })
}

/// Mean sub-cluster size, rounded down.
pub fn average_size(subclusters: &[SubCluster]) -> usize {
    if subclusters.is_empty() {
        return 0;
    }
    subclusters.iter().map(SubCluster::len).sum::<usize>() / subclusters.len()
}

/// Caps every sub-cluster at the (floored) mean size by seeded random
/// downsampling. The seed point always survives; member order is preserved.
pub fn handle_subclusters(subclusters: Vec<SubCluster>, seed: u64) -> Result<Vec<SubCluster>> {
    if subclusters.is_empty() {
        return Err(Error::invalid("no sub-clusters to balance"));
    }
    let cap = average_size(&subclusters);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(subclusters
        .into_iter()
        .map(|mut sc| {
            if sc.len() > cap {
                let others: Vec<usize> = sc.members.iter().copied().filter(|&m| m != sc.seed).collect();
                let mut keep: Vec<usize> = sample(&mut rng, others.len(), cap - 1).into_vec();
                keep.sort_unstable();
                let kept: std::collections::HashSet<usize> =
                    keep.into_iter().map(|i| others[i]).collect();
                sc.members.retain(|m| *m == sc.seed || kept.contains(m));
            }
            sc
        })
        .collect())
}

/// Draws up to `target` points spread evenly over the sub-clusters.
///
/// Each sub-cluster first contributes `min(target / count, size)` random
/// members; any shortfall is handed out one point at a time, round-robin,
/// to the sub-clusters with the most members left.
pub fn stage1_select(subclusters: &[SubCluster], target: usize, seed: u64) -> Result<Vec<usize>> {
    if target == 0 {
        return Err(Error::invalid("stage-1 target must be positive"));
    }
    if subclusters.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shuffled: Vec<Vec<usize>> = subclusters
        .iter()
        .map(|sc| {
            let mut m = sc.members.clone();
            m.shuffle(&mut rng);
            m
        })
        .collect();
    let quota = target / subclusters.len();
    let mut taken: Vec<usize> = shuffled.iter().map(|m| m.len().min(quota)).collect();
    let supply: usize = shuffled.iter().map(Vec::len).sum();
    let mut total: usize = taken.iter().sum();
    let goal = target.min(supply);
    while total < goal {
        let mut order: Vec<usize> = (0..shuffled.len())
            .filter(|&i| taken[i] < shuffled[i].len())
            .collect();
        order.sort_by(|&a, &b| {
            let ra = shuffled[a].len() - taken[a];
            let rb = shuffled[b].len() - taken[b];
            rb.cmp(&ra).then(a.cmp(&b))
        });
        for i in order {
            if total == goal {
                break;
            }
            taken[i] += 1;
            total += 1;
        }
    }
    Ok(shuffled
        .iter()
        .zip(&taken)
        .flat_map(|(m, &t)| m[..t].iter().copied())
        .collect())
}
