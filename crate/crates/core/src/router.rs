//! Expert profiles and nearest-centroid routing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::centroid;
use crate::corpus::{cosine, distance, write_vectors, CorpusMatrix, EmbeddingTable};
use crate::error::{Error, Result};
use crate::select::SelectionSet;

pub const PROFILES_JSON: &str = "profiles.json";
pub const PROFILES_BIN: &str = "profiles.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertProfile {
    pub expert_id: usize,
    pub embedding: Vec<f64>,
    /// Where the expert's training records live (e.g. an export file).
    pub training_set: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub expert_id: usize,
    pub distance: f64,
    /// Cosine similarity between query and expert embedding.
    pub relevance: f64,
    /// Every expert as `(expert_id, distance)`, nearest first.
    pub ranked: Vec<(usize, f64)>,
}

/// One profile per cluster of `selection`, embedded at the mean of the
/// cluster's selected rows.
pub fn build_profiles(selection: &SelectionSet, matrix: &CorpusMatrix, training_set: impl Fn(usize) -> String) -> Result<Vec<ExpertProfile>> {
    selection
        .clusters
        .iter()
        .enumerate()
        .map(|(expert_id, ids)| {
            if ids.is_empty() {
                return Err(Error::invalid(format!("cluster {expert_id} has no selected records")));
            }
            let rows: Vec<&[f64]> = ids
                .iter()
                .map(|id| {
                    matrix
                        .vector(id)
                        .ok_or_else(|| Error::MissingEmbeddings(vec![id.clone()]))
                })
                .collect::<Result<_>>()?;
            Ok(ExpertProfile {
                expert_id,
                embedding: centroid(&rows)?,
                training_set: training_set(expert_id),
                count: ids.len(),
            })
        })
        .collect()
}

/// Routes `query` to the expert with the nearest embedding; ties go to the
/// lowest expert id.
pub fn route(query: &[f64], profiles: &[ExpertProfile]) -> Result<RouteDecision> {
    if profiles.is_empty() {
        return Err(Error::invalid("no expert profiles"));
    }
    let mut ranked = Vec::with_capacity(profiles.len());
    for p in profiles {
        if p.embedding.len() != query.len() {
            return Err(Error::DimensionMismatch {
                id: format!("expert {}", p.expert_id),
                expected: p.embedding.len(),
                actual: query.len(),
            });
        }
        ranked.push((p.expert_id, distance(query, &p.embedding)));
    }
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let (expert_id, dist) = ranked[0];
    let chosen = profiles
        .iter()
        .find(|p| p.expert_id == expert_id)
        .expect("ranked from profiles");
    Ok(RouteDecision {
        expert_id,
        distance: dist,
        relevance: cosine(query, &chosen.embedding),
        ranked,
    })
}

#[derive(Serialize, Deserialize)]
struct ProfileMeta {
    expert_id: usize,
    count: usize,
    training_set: String,
}

/// Writes `profiles.json` (metadata) and `profiles.bin` (+ `.ids`) into `dir`.
pub fn save_profiles(dir: &Path, profiles: &[ExpertProfile]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta: Vec<ProfileMeta> = profiles
        .iter()
        .map(|p| ProfileMeta {
            expert_id: p.expert_id,
            count: p.count,
            training_set: p.training_set.clone(),
        })
        .collect();
    let json_path = dir.join(PROFILES_JSON);
    std::fs::write(&json_path, serde_json::to_string_pretty(&meta)?)
        .map_err(|e| Error::io(&json_path, e))?;
    let ids: Vec<String> = profiles.iter().map(|p| format!("expert-{}", p.expert_id)).collect();
    let rows: Vec<&[f64]> = profiles.iter().map(|p| p.embedding.as_slice()).collect();
    let d = rows.first().map_or(0, |r| r.len());
    write_vectors(&dir.join(PROFILES_BIN), &ids, &rows, d)
}

pub fn load_profiles(dir: &Path) -> Result<Vec<ExpertProfile>> {
    let json_path = dir.join(PROFILES_JSON);
    let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let meta: Vec<ProfileMeta> = serde_json::from_str(&text)?;
    let vectors = EmbeddingTable::load_binary(dir.join(PROFILES_BIN))?;
    meta.into_iter()
        .map(|m| {
            let embedding = vectors
                .get(&format!("expert-{}", m.expert_id))
                .ok_or_else(|| Error::Format(format!("no vector for expert {}", m.expert_id)))?
                .to_vec();
            Ok(ExpertProfile {
                expert_id: m.expert_id,
                embedding,
                training_set: m.training_set,
                count: m.count,
            })
        })
        .collect()
}
