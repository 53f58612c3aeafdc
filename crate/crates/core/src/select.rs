//! Stage-2 supplementation by a modified maximal-marginal-relevance utility,
//! and the random / k-center-greedy baselines.
//!
//! The utility of adding candidate `d` to a cluster with centroid `mu` and
//! current selection `S` is
//!
//! ```text
//! U(d) = l1 * sim(mu, d) - l2 * max_{s in S} sim(s, d) + l3 * score_llm(d)
//! ```
//!
//! with cosine similarity, and the max term taken as 0 while `S` is empty.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{cosine, distance, CorpusMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmrWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for MmrWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.2,
            lambda2: 0.2,
            lambda3: 0.6,
        }
    }
}

impl MmrWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let w = Self {
            lambda1,
            lambda2,
            lambda3,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3];
        if all.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::invalid("MMR weights must be finite and non-negative"));
        }
        if all.iter().all(|&l| l == 0.0) {
            return Err(Error::invalid("at least one MMR weight must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
    BaselineRandom,
    BaselineKcenter,
}

/// Per-cluster selected record ids for one stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionSet {
    pub stage: Stage,
    pub clusters: Vec<Vec<String>>,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct SelectionLine {
    cluster: usize,
    stage: Stage,
    ids: Vec<String>,
    config_hash: String,
    seed: u64,
}

impl SelectionSet {
    pub fn new(stage: Stage, clusters: Vec<Vec<String>>, config_hash: impl Into<String>, seed: u64) -> Result<Self> {
        let set = Self {
            stage,
            clusters,
            config_hash: config_hash.into(),
            seed,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (c, ids) in self.clusters.iter().enumerate() {
            for id in ids {
                if !seen.insert(id.as_str()) {
                    return Err(Error::invalid(format!(
                        "{id:?} selected more than once (cluster {c})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.clusters.iter().map(Vec::len).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (cluster, ids) in self.clusters.iter().enumerate() {
            let line = SelectionLine {
                cluster,
                stage: self.stage,
                ids: ids.clone(),
                config_hash: self.config_hash.clone(),
                seed: self.seed,
            };
            text.push_str(&serde_json::to_string(&line)?);
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: SelectionLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            lines.push(parsed);
        }
        let first = lines
            .first()
            .ok_or_else(|| Error::Format(format!("{} holds no clusters", path.display())))?;
        let (stage, config_hash, seed) = (first.stage, first.config_hash.clone(), first.seed);
        let mut clusters = vec![Vec::new(); lines.len()];
        for line in lines {
            if line.stage != stage || line.cluster >= clusters.len() {
                return Err(Error::Format(format!(
                    "inconsistent selection line for cluster {}",
                    line.cluster
                )));
            }
            clusters[line.cluster] = line.ids;
        }
        Self::new(stage, clusters, config_hash, seed)
    }
}

/// Utility of a candidate given its centroid similarity inputs, its largest
/// similarity to the current selection (`None` for an empty selection) and
/// its model score.
pub fn mmr_utility(
    candidate: &[f64],
    centroid: &[f64],
    max_selected_sim: Option<f64>,
    score_llm: f64,
    w: &MmrWeights,
) -> f64 {
    w.lambda1 * cosine(centroid, candidate) - w.lambda2 * max_selected_sim.unwrap_or(0.0)
        + w.lambda3 * score_llm
}

pub fn max_similarity(candidate: &[f64], selected: &[&[f64]]) -> Option<f64> {
    selected
        .iter()
        .map(|s| cosine(s, candidate))
        .reduce(f64::max)
}

fn lookup<'a>(matrix: &'a CorpusMatrix, id: &str) -> Result<&'a [f64]> {
    matrix
        .vector(id)
        .ok_or_else(|| Error::MissingEmbeddings(vec![id.to_string()]))
}

/// Utility of `candidate_id` against the selection `selected`.
pub fn mmr_utility_for(
    candidate_id: &str,
    centroid: &[f64],
    selected: &[String],
    matrix: &CorpusMatrix,
    scores: &HashMap<String, f64>,
    w: &MmrWeights,
) -> Result<f64> {
    if selected.iter().any(|s| s == candidate_id) {
        return Err(Error::invalid(format!("{candidate_id:?} is already selected")));
    }
    let score = *scores
        .get(candidate_id)
        .ok_or_else(|| Error::invalid(format!("{candidate_id:?} has no model score")))?;
    let candidate = lookup(matrix, candidate_id)?;
    let selected: Vec<&[f64]> = selected
        .iter()
        .map(|id| lookup(matrix, id))
        .collect::<Result<_>>()?;
    Ok(mmr_utility(
        candidate,
        centroid,
        max_similarity(candidate, &selected),
        score,
        w,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyOutcome {
    /// Additions in pick order.
    pub added: Vec<String>,
    /// True when the pool ran out before `target` was reached.
    pub exhausted: bool,
}

/// Greedily grows `stage1` to `target` members, each step adding the
/// highest-utility candidate (ties to the lowest id) and refreshing every
/// candidate's max-similarity against the new pick.
pub fn mmr_greedy(
    pool: &[String],
    stage1: &[String],
    centroid: &[f64],
    matrix: &CorpusMatrix,
    scores: &HashMap<String, f64>,
    w: &MmrWeights,
    target: usize,
) -> Result<GreedyOutcome> {
    w.validate()?;
    if target < stage1.len() {
        return Err(Error::invalid(format!(
            "target {target} is below the {} stage-1 selections",
            stage1.len()
        )));
    }
    let stage1_set: HashSet<&str> = stage1.iter().map(String::as_str).collect();
    if let Some(dup) = pool.iter().find(|id| stage1_set.contains(id.as_str())) {
        return Err(Error::invalid(format!("{dup:?} is in both the pool and stage 1")));
    }
    let mut pool_ids: Vec<&str> = pool.iter().map(String::as_str).collect();
    pool_ids.sort_unstable();
    pool_ids.dedup();
    let vectors: Vec<&[f64]> = pool_ids
        .iter()
        .map(|id| lookup(matrix, id))
        .collect::<Result<_>>()?;
    let llm: Vec<f64> = pool_ids
        .iter()
        .map(|id| {
            scores
                .get(*id)
                .copied()
                .ok_or_else(|| Error::invalid(format!("{id:?} has no model score")))
        })
        .collect::<Result<_>>()?;
    let selected: Vec<&[f64]> = stage1
        .iter()
        .map(|id| lookup(matrix, id))
        .collect::<Result<_>>()?;

    let centroid_sim: Vec<f64> = vectors.par_iter().map(|v| cosine(centroid, v)).collect();
    let mut max_sim: Vec<Option<f64>> = vectors
        .par_iter()
        .map(|v| max_similarity(v, &selected))
        .collect();
    let mut taken = vec![false; pool_ids.len()];
    let need = target - stage1.len();
    let mut added = Vec::with_capacity(need.min(pool_ids.len()));

    while added.len() < need {
        let utilities: Vec<Option<f64>> = (0..pool_ids.len())
            .into_par_iter()
            .map(|i| {
                (!taken[i]).then(|| {
                    w.lambda1 * centroid_sim[i] - w.lambda2 * max_sim[i].unwrap_or(0.0)
                        + w.lambda3 * llm[i]
                })
            })
            .collect();
        // `pool_ids` is sorted, so the first maximum is the lowest id.
        let mut best: Option<(usize, f64)> = None;
        for (i, u) in utilities.iter().enumerate() {
            if let Some(u) = *u {
                if best.is_none_or(|(_, b)| u > b) {
                    best = Some((i, u));
                }
            }
        }
        let Some((pick, _)) = best else { break };
        taken[pick] = true;
        added.push(pool_ids[pick].to_string());
        let picked = vectors[pick];
        max_sim
            .par_iter_mut()
            .zip(vectors.par_iter())
            .for_each(|(m, v)| {
                let s = cosine(picked, v);
                *m = Some(m.map_or(s, |cur| cur.max(s)));
            });
    }
    let exhausted = added.len() < need;
    if exhausted {
        log::warn!(
            "candidate pool exhausted: added {} of {need} requested",
            added.len()
        );
    }
    Ok(GreedyOutcome { added, exhausted })
}

/// Uniform sample of `n` ids without replacement, in draw order.
pub fn random_select(pool: &[String], n: usize, seed: u64) -> Vec<String> {
    if n >= pool.len() {
        return pool.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample(&mut rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect()
}

/// Farthest-first traversal: adds up to `n` pool points, each maximizing its
/// distance to the nearest current center (ties to the lowest id). With no
/// initial centers the first pick is the point closest to `centroid`.
pub fn k_center_greedy(
    pool: &[String],
    centers: &[String],
    n: usize,
    matrix: &CorpusMatrix,
    centroid: &[f64],
) -> Result<Vec<String>> {
    let mut ids: Vec<&str> = pool.iter().map(String::as_str).collect();
    ids.sort_unstable();
    ids.dedup();
    let vectors: Vec<&[f64]> = ids
        .iter()
        .map(|id| lookup(matrix, id))
        .collect::<Result<_>>()?;
    let center_vecs: Vec<&[f64]> = centers
        .iter()
        .map(|id| lookup(matrix, id))
        .collect::<Result<_>>()?;
    let mut taken = vec![false; ids.len()];
    let mut min_dist: Vec<f64> = vectors
        .par_iter()
        .map(|v| {
            center_vecs
                .iter()
                .map(|c| distance(c, v))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut picks = Vec::with_capacity(n.min(ids.len()));

    while picks.len() < n.min(ids.len()) {
        let pick = if center_vecs.is_empty() && picks.is_empty() {
            let d: Vec<f64> = vectors.iter().map(|v| distance(centroid, v)).collect();
            (0..ids.len())
                .reduce(|best, i| if d[i] < d[best] { i } else { best })
                .expect("non-empty pool")
        } else {
            let mut best: Option<usize> = None;
            for i in (0..ids.len()).filter(|&i| !taken[i]) {
                if best.is_none_or(|b| min_dist[i] > min_dist[b]) {
                    best = Some(i);
                }
            }
            best.expect("pool not exhausted")
        };
        taken[pick] = true;
        picks.push(ids[pick].to_string());
        let picked = vectors[pick];
        min_dist
            .par_iter_mut()
            .zip(vectors.par_iter())
            .for_each(|(m, v)| *m = m.min(distance(picked, v)));
    }
    Ok(picks)
}
