//! Resumable end-to-end run: ingest, embed, cluster, stage-1 density
//! sampling, generation, scoring, stage-2 MMR supplementation, expert
//! profiles, export and report.
//!
//! Every stage has a fingerprint chained from its upstream stage's
//! fingerprint, the config fields it reads and the content hash of any input
//! file it reads. A stage runs only when every upstream stage is recorded in
//! the manifest with its current fingerprint; re-running a stage whose
//! fingerprint and artifacts are unchanged does nothing.
//!
//! Per-stage randomness comes from [`stage_seed`]: the run seed XOR the first
//! eight bytes (little-endian) of SHA-256 of the stage label.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::client::{
    read_generations, write_generations, CompletionCache, CompletionClient, CompletionRequest,
    EmbeddingClient, EndpointConfig, Generation, ModelTag,
};
use crate::cluster::{self, kmeans, ClusterModel};
use crate::corpus::{self, attach_embeddings, load_corpus, save_corpus, CorpusMatrix, EmbeddingTable, Record};
use crate::density::{self, adbscan, handle_subclusters, stage1_select};
use crate::error::{Error, Result};
use crate::router::{build_profiles, load_profiles, route, save_profiles};
use crate::scoring::{read_scores, score_pool, write_scores, RougeVariant};
use crate::select::{k_center_greedy, mmr_greedy, random_select, MmrWeights, SelectionSet, Stage};

pub const MANIFEST: &str = "manifest.json";
pub const RESOLVED_CONFIG: &str = "config.resolved.json";
const LOCK: &str = ".lock";

const CORPUS: &str = "corpus.jsonl";
const EMBEDDINGS: &str = "embeddings.bin";
const CLUSTERS: &str = "clusters.json";
const CENTROIDS: &str = "centroids.bin";
const STAGE1: &str = "stage1.jsonl";
const STAGE1_REPORT: &str = "stage1_report.jsonl";
const RAW_OUTPUTS: &str = "generations/raw.jsonl";
const LORA_OUTPUTS: &str = "generations/lora.jsonl";
const SCORES: &str = "scores.csv";
const SCORE_EXCLUSIONS: &str = "score_exclusions.jsonl";
const STAGE2: &str = "stage2.jsonl";
const PROFILES_DIR: &str = "profiles";
const EXPORT_DIR: &str = "export";
const REPORT_DIR: &str = "report";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageName {
    Ingest,
    Embed,
    Cluster,
    Stage1,
    Generate,
    Score,
    Stage2,
    Profiles,
    Export,
    Report,
}

impl StageName {
    pub const ALL: [StageName; 10] = [
        StageName::Ingest,
        StageName::Embed,
        StageName::Cluster,
        StageName::Stage1,
        StageName::Generate,
        StageName::Score,
        StageName::Stage2,
        StageName::Profiles,
        StageName::Export,
        StageName::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Ingest => "ingest",
            StageName::Embed => "embed",
            StageName::Cluster => "cluster",
            StageName::Stage1 => "stage1",
            StageName::Generate => "generate",
            StageName::Score => "score",
            StageName::Stage2 => "stage2",
            StageName::Profiles => "profiles",
            StageName::Export => "export",
            StageName::Report => "report",
        }
    }

    fn position(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).expect("listed")
    }

    pub fn upstream(self) -> &'static [StageName] {
        &Self::ALL[..self.position()]
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Where vectors or generated outputs come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    File(PathBuf),
    Endpoint(EndpointConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSources {
    pub raw: Source,
    pub lora: Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProfileSource {
    /// Centroid of the stage-2 selection.
    #[default]
    Selection,
    /// Centroid of the whole k-means cluster.
    Cluster,
}

fn default_k() -> usize {
    cluster::DEFAULT_K
}
fn default_knn_k() -> usize {
    density::DEFAULT_KNN_K
}
fn default_stage1_target() -> usize {
    2000
}
fn default_stage2_target() -> usize {
    4000
}
fn default_max_iter() -> usize {
    cluster::DEFAULT_MAX_ITER
}
fn default_tol() -> f64 {
    cluster::DEFAULT_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    pub embeddings: Source,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_knn_k")]
    pub knn_k: usize,
    #[serde(default = "default_stage1_target")]
    pub stage1_target: usize,
    #[serde(default = "default_stage2_target")]
    pub stage2_target: usize,
    #[serde(default)]
    pub mmr: MmrWeights,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_iter")]
    pub kmeans_max_iter: usize,
    #[serde(default = "default_tol")]
    pub kmeans_tol: f64,
    #[serde(default)]
    pub rouge: RougeVariant,
    #[serde(default)]
    pub generation: Option<GenerationSources>,
    #[serde(default)]
    pub profile_source: ProfileSource,
    pub output_dir: PathBuf,
    /// Completion cache location; defaults to `<output_dir>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

impl PipelineConfig {
    /// Reads a JSON config; relative paths resolve against the config's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.output_dir);
        if let Some(c) = self.cache_dir.as_mut() {
            fix(c);
        }
        if let Source::File(p) = &mut self.embeddings {
            fix(p);
        }
        if let Some(g) = self.generation.as_mut() {
            for s in [&mut g.raw, &mut g.lora] {
                if let Source::File(p) = s {
                    fix(p);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be at least 1".into()));
        }
        if self.stage1_target == 0 {
            return Err(Error::Config("stage1_target must be positive".into()));
        }
        if self.stage2_target < self.stage1_target {
            return Err(Error::Config("stage2_target must be at least stage1_target".into()));
        }
        self.mmr.validate().map_err(|e| Error::Config(e.to_string()))?;
        let endpoints = [Some(&self.embeddings)]
            .into_iter()
            .chain(self.generation.iter().flat_map(|g| [Some(&g.raw), Some(&g.lora)]))
            .flatten();
        for s in endpoints {
            if let Source::Endpoint(e) = s {
                e.validate()?;
            }
        }
        Ok(())
    }

    fn cache_path(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("cache"))
            .join("completions.jsonl")
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_hex(data: &[u8]) -> String {
    hex(&Sha256::digest(data))
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Stage-specific seed: `seed XOR le_u64(sha256(label)[..8])`.
pub fn stage_seed(seed: u64, label: &str) -> u64 {
    let digest = Sha256::digest(label.as_bytes());
    seed ^ u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Location-independent view of a source: file contents or the endpoint
/// settings that change outputs.
fn source_identity(source: &Source) -> Result<Value> {
    Ok(match source {
        Source::File(p) => json!({ "file_sha256": file_hash(p)? }),
        Source::Endpoint(e) => json!({
            "base_url": e.base_url,
            "model": e.model,
            "temperature": e.temperature,
            "max_tokens": e.max_tokens,
        }),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub fingerprint: String,
    /// Artifact paths relative to the output directory.
    pub artifacts: Vec<String>,
    /// Per-cluster record counts after this stage, where meaningful.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cluster_counts: Vec<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub stages: BTreeMap<StageName, StageRecord>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn is_complete(&self, stage: StageName) -> bool {
        self.stages.contains_key(&stage)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    UpToDate,
}

struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is locked by another run (remove {} if no run is active)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

/// Which baseline selector to run over each cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Random,
    KCenter,
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Baseline::Random),
            "kcenter" | "k-center" => Ok(Baseline::KCenter),
            _ => Err(Error::Config(format!("unknown baseline {s:?}"))),
        }
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    out: PathBuf,
    manifest: RunManifest,
    config_hash: String,
    fingerprints: HashMap<StageName, String>,
    _lock: RunLock,
}

impl Pipeline {
    pub fn open(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.output_dir.clone();
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let lock = RunLock::acquire(&out)?;
        let manifest_path = out.join(MANIFEST);
        let manifest = if manifest_path.exists() {
            RunManifest::load(&manifest_path)?
        } else {
            RunManifest::default()
        };
        let mut pipeline = Self {
            cfg,
            out,
            manifest,
            config_hash: String::new(),
            fingerprints: HashMap::new(),
            _lock: lock,
        };
        pipeline.config_hash = pipeline.compute_config_hash()?;
        pipeline.manifest.config_hash = pipeline.config_hash.clone();
        let resolved = pipeline.out.join(RESOLVED_CONFIG);
        std::fs::write(&resolved, serde_json::to_string_pretty(&pipeline.cfg)?)
            .map_err(|e| Error::io(&resolved, e))?;
        Ok(pipeline)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn output_dir(&self) -> &Path {
        &self.out
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn generation_sources(&self) -> Result<&GenerationSources> {
        self.cfg
            .generation
            .as_ref()
            .ok_or_else(|| Error::Config("no generation sources configured".into()))
    }

    fn compute_config_hash(&mut self) -> Result<String> {
        let mut parts = Vec::new();
        for stage in StageName::ALL {
            parts.push(self.fingerprint(stage)?);
        }
        Ok(parts.last().cloned().unwrap_or_default())
    }

    /// Config fields and input-file hashes a stage depends on.
    fn stage_inputs(&self, stage: StageName) -> Result<Value> {
        let c = &self.cfg;
        Ok(match stage {
            StageName::Ingest => json!({ "corpus_sha256": file_hash(&c.corpus)? }),
            StageName::Embed => source_identity(&c.embeddings)?,
            StageName::Cluster => json!({
                "k": c.k, "seed": c.seed, "max_iter": c.kmeans_max_iter, "tol": c.kmeans_tol,
            }),
            StageName::Stage1 => json!({
                "knn_k": c.knn_k, "target": c.stage1_target, "seed": c.seed,
            }),
            StageName::Generate => match &c.generation {
                Some(g) => json!({
                    "raw": source_identity(&g.raw)?,
                    "lora": source_identity(&g.lora)?,
                }),
                None => Value::Null,
            },
            StageName::Score => json!({ "rouge": c.rouge }),
            StageName::Stage2 => json!({ "mmr": c.mmr, "target": c.stage2_target }),
            StageName::Profiles => json!({ "source": c.profile_source }),
            StageName::Export | StageName::Report => Value::Null,
        })
    }

    fn fingerprint(&mut self, stage: StageName) -> Result<String> {
        if let Some(fp) = self.fingerprints.get(&stage) {
            return Ok(fp.clone());
        }
        let parent = match stage.upstream().last() {
            Some(&up) => self.fingerprint(up)?,
            None => String::new(),
        };
        let inputs = self.stage_inputs(stage)?;
        let material = format!("{parent}\n{stage}\n{}", serde_json::to_string(&inputs)?);
        let fp = sha256_hex(material.as_bytes());
        self.fingerprints.insert(stage, fp.clone());
        Ok(fp)
    }

    fn check_upstream(&mut self, stage: StageName) -> Result<()> {
        for &up in stage.upstream() {
            let expected = self.fingerprint(up)?;
            match self.manifest.stages.get(&up) {
                None => {
                    return Err(Error::Upstream(format!(
                        "stage {stage} needs {up}, which has not run"
                    )))
                }
                Some(rec) if rec.fingerprint != expected => {
                    return Err(Error::Upstream(format!(
                        "stage {up} ran with a different configuration; re-run it before {stage}"
                    )))
                }
                Some(rec) => {
                    if let Some(missing) = rec.artifacts.iter().find(|a| !self.out.join(a).exists()) {
                        return Err(Error::Upstream(format!(
                            "artifact {missing} of stage {up} is missing; re-run {up}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn is_current(&mut self, stage: StageName) -> Result<bool> {
        let fp = self.fingerprint(stage)?;
        Ok(match self.manifest.stages.get(&stage) {
            Some(rec) => rec.fingerprint == fp && rec.artifacts.iter().all(|a| self.out.join(a).exists()),
            None => false,
        })
    }

    fn save_manifest(&self) -> Result<()> {
        let path = self.path(MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(&self.manifest)? + "\n")
            .map_err(|e| Error::io(&path, e))
    }

    /// Runs one stage if it is not already current.
    pub fn run_stage(&mut self, stage: StageName) -> Result<StageStatus> {
        self.check_upstream(stage)?;
        if self.is_current(stage)? {
            log::info!("stage {stage} is up to date");
            return Ok(StageStatus::UpToDate);
        }
        log::info!("running stage {stage}");
        let mut record = match stage {
            StageName::Ingest => self.ingest()?,
            StageName::Embed => self.embed()?,
            StageName::Cluster => self.cluster()?,
            StageName::Stage1 => self.stage1()?,
            StageName::Generate => self.generate()?,
            StageName::Score => self.score()?,
            StageName::Stage2 => self.stage2()?,
            StageName::Profiles => self.profiles()?,
            StageName::Export => self.export()?,
            StageName::Report => self.report()?,
        };
        record.fingerprint = self.fingerprint(stage)?;
        self.manifest.stages.insert(stage, record);
        self.save_manifest()?;
        Ok(StageStatus::Ran)
    }

    /// Runs every stage in order, skipping current ones.
    pub fn run_all(&mut self) -> Result<()> {
        for stage in StageName::ALL {
            self.run_stage(stage)?;
        }
        Ok(())
    }

    fn records(&self) -> Result<Vec<Record>> {
        load_corpus(self.path(CORPUS))
    }

    fn matrix(&self, records: &[Record]) -> Result<CorpusMatrix> {
        let table = EmbeddingTable::load_binary(self.path(EMBEDDINGS))?;
        attach_embeddings(records, &table)?.normalize()
    }

    fn cluster_model(&self, matrix: &CorpusMatrix) -> Result<ClusterModel> {
        let mut model = ClusterModel::load(&self.path(CLUSTERS), &self.path(CENTROIDS))?;
        model.recompute_centroids(matrix)?;
        Ok(model)
    }

    fn ingest(&self) -> Result<StageRecord> {
        let records = load_corpus(&self.cfg.corpus)?;
        save_corpus(self.path(CORPUS), &records)?;
        let mut rec = StageRecord {
            artifacts: vec![CORPUS.into()],
            ..Default::default()
        };
        rec.notes.insert("records".into(), json!(records.len()));
        Ok(rec)
    }

    fn embed(&self) -> Result<StageRecord> {
        let records = self.records()?;
        let table = match &self.cfg.embeddings {
            Source::File(path) => EmbeddingTable::load(path)?,
            Source::Endpoint(cfg) => {
                let client = EmbeddingClient::new(cfg.clone())?;
                let texts: Vec<String> = records.iter().map(Record::embed_text).collect();
                let vectors = client.embed_batch(&texts)?;
                let mut table = EmbeddingTable::new();
                for (r, v) in records.iter().zip(vectors) {
                    table.insert(r.id.clone(), v)?;
                }
                table
            }
        };
        let matrix = attach_embeddings(&records, &table)?;
        // Fail early on vectors that cannot be normalized.
        matrix.clone().normalize()?;
        matrix.save_binary(self.path(EMBEDDINGS))?;
        let mut rec = StageRecord {
            artifacts: vec![EMBEDDINGS.into(), "embeddings.ids".into()],
            ..Default::default()
        };
        rec.notes.insert("dim".into(), json!(matrix.dim()));
        Ok(rec)
    }

    fn cluster(&self) -> Result<StageRecord> {
        let records = self.records()?;
        let matrix = self.matrix(&records)?;
        let seed = stage_seed(self.cfg.seed, "cluster");
        let model = kmeans(&matrix, self.cfg.k, seed, self.cfg.kmeans_max_iter, self.cfg.kmeans_tol)?;
        model.save(&self.path(CLUSTERS), &self.path(CENTROIDS))?;
        let mut rec = StageRecord {
            artifacts: vec![CLUSTERS.into(), CENTROIDS.into(), "centroids.ids".into()],
            cluster_counts: model.sizes(),
            ..Default::default()
        };
        rec.notes.insert("wcss".into(), json!(model.wcss));
        rec.notes.insert("iterations".into(), json!(model.iterations));
        Ok(rec)
    }

    fn stage1(&self) -> Result<StageRecord> {
        let records = self.records()?;
        let matrix = self.matrix(&records)?;
        let model = self.cluster_model(&matrix)?;
        let base_seed = stage_seed(self.cfg.seed, "stage1");
        let mut clusters = Vec::with_capacity(model.k);
        let mut report = String::new();
        for c in 0..model.k {
            let members = model.members(c);
            let (picked, line) = stage1_for_cluster(&matrix, &members, self.cfg.knn_k, self.cfg.stage1_target, base_seed, c)?;
            report.push_str(&serde_json::to_string(&line)?);
            report.push('\n');
            clusters.push(picked.into_iter().map(|i| matrix.id(i).to_string()).collect());
        }
        let selection = SelectionSet::new(Stage::Stage1, clusters, &self.config_hash, base_seed)?;
        selection.save(&self.path(STAGE1))?;
        let report_path = self.path(STAGE1_REPORT);
        std::fs::write(&report_path, report).map_err(|e| Error::io(&report_path, e))?;
        Ok(StageRecord {
            artifacts: vec![STAGE1.into(), STAGE1_REPORT.into()],
            cluster_counts: selection.counts(),
            ..Default::default()
        })
    }

    /// Per-cluster records not chosen in stage 1, in corpus order.
    fn stage2_pools(&self, model: &ClusterModel, stage1: &SelectionSet) -> Vec<Vec<String>> {
        let chosen: HashSet<&str> = stage1.clusters.iter().flatten().map(String::as_str).collect();
        (0..model.k)
            .map(|c| {
                model
                    .members(c)
                    .into_iter()
                    .map(|i| model.ids[i].clone())
                    .filter(|id| !chosen.contains(id.as_str()))
                    .collect()
            })
            .collect()
    }

    fn generate(&self) -> Result<StageRecord> {
        let sources = self.generation_sources()?.clone();
        let records = self.records()?;
        let matrix = self.matrix(&records)?;
        let model = self.cluster_model(&matrix)?;
        let stage1 = SelectionSet::load(&self.path(STAGE1))?;
        let pool: Vec<String> = self.stage2_pools(&model, &stage1).into_iter().flatten().collect();
        let by_id: HashMap<&str, &Record> = records.iter().map(|r| (r.id.as_str(), r)).collect();
        let dir = self.path("generations");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

        let mut rec = StageRecord {
            artifacts: vec![RAW_OUTPUTS.into(), LORA_OUTPUTS.into()],
            ..Default::default()
        };
        for (tag, source, rel) in [
            (ModelTag::Raw, &sources.raw, RAW_OUTPUTS),
            (ModelTag::Lora, &sources.lora, LORA_OUTPUTS),
        ] {
            let outputs: HashMap<String, Generation> = match source {
                Source::File(path) => {
                    let mut all = read_generations(path)?;
                    pool.iter()
                        .map(|id| {
                            let g = all
                                .remove(id)
                                .unwrap_or_else(|| Generation::Failed("missing from output file".into()));
                            (id.clone(), g)
                        })
                        .collect()
                }
                Source::Endpoint(cfg) => {
                    let client = CompletionClient::new(cfg.clone())?;
                    let requests: Vec<CompletionRequest> = pool
                        .iter()
                        .map(|id| CompletionRequest {
                            record_id: id.clone(),
                            prompt: by_id[id.as_str()].embed_text(),
                            model_tag: tag,
                        })
                        .collect();
                    let mut cache = CompletionCache::open(self.cfg.cache_path())?;
                    let results = client.complete_batch(&requests, Some(&mut cache))?;
                    if !pool.is_empty() && results.values().all(|g| g.text().is_none()) {
                        return Err(Error::Service(format!(
                            "every {} generation failed",
                            tag.as_str()
                        )));
                    }
                    results.into_iter().collect()
                }
            };
            let failed = pool.iter().filter(|id| outputs[*id].text().is_none()).count();
            write_generations(&self.path(rel), pool.iter().map(|id| (id.as_str(), &outputs[id])))?;
            rec.notes.insert(format!("{}_failed", tag.as_str()), json!(failed));
        }
        rec.notes.insert("pool".into(), json!(pool.len()));
        Ok(rec)
    }

    fn score(&self) -> Result<StageRecord> {
        let records = self.records()?;
        let raw = read_generations(&self.path(RAW_OUTPUTS))?;
        let lora = read_generations(&self.path(LORA_OUTPUTS))?;
        let pool: Vec<&Record> = records.iter().filter(|r| raw.contains_key(&r.id) || lora.contains_key(&r.id)).collect();
        let scored = score_pool(&pool, &raw, &lora, self.cfg.rouge);
        write_scores(&self.path(SCORES), &scored.triples)?;
        let mut text = String::new();
        for (id, reason) in &scored.excluded {
            text.push_str(&serde_json::to_string(&json!({ "id": id, "reason": reason }))?);
            text.push('\n');
        }
        let path = self.path(SCORE_EXCLUSIONS);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let mut rec = StageRecord {
            artifacts: vec![SCORES.into(), SCORE_EXCLUSIONS.into()],
            ..Default::default()
        };
        rec.notes.insert("scored".into(), json!(scored.triples.len()));
        rec.notes.insert("excluded".into(), json!(scored.excluded.len()));
        Ok(rec)
    }

    fn stage2(&self) -> Result<StageRecord> {
        let records = self.records()?;
        let matrix = self.matrix(&records)?;
        let model = self.cluster_model(&matrix)?;
        let stage1 = SelectionSet::load(&self.path(STAGE1))?;
        let scores: HashMap<String, f64> = read_scores(&self.path(SCORES))?
            .into_iter()
            .map(|t| (t.id, t.llm))
            .collect();
        let pools = self.stage2_pools(&model, &stage1);
        let mut clusters = Vec::with_capacity(model.k);
        let mut exhausted = Vec::new();
        for (c, pool) in pools.into_iter().enumerate() {
            let pool: Vec<String> = pool.into_iter().filter(|id| scores.contains_key(id)).collect();
            let base = &stage1.clusters[c];
            let outcome = mmr_greedy(
                &pool,
                base,
                &model.centroids[c],
                &matrix,
                &scores,
                &self.cfg.mmr,
                self.cfg.stage2_target,
            )?;
            if outcome.exhausted {
                exhausted.push(c);
            }
            clusters.push(base.iter().cloned().chain(outcome.added).collect());
        }
        let selection = SelectionSet::new(Stage::Stage2, clusters, &self.config_hash, stage1.seed)?;
        selection.save(&self.path(STAGE2))?;
        let mut rec = StageRecord {
            artifacts: vec![STAGE2.into()],
            cluster_counts: selection.counts(),
            ..Default::default()
        };
        if !exhausted.is_empty() {
            rec.notes.insert("exhausted_clusters".into(), json!(exhausted));
        }
        Ok(rec)
    }

    fn profile_selection(&self, matrix: &CorpusMatrix) -> Result<SelectionSet> {
        match self.cfg.profile_source {
            ProfileSource::Selection => SelectionSet::load(&self.path(STAGE2)),
            ProfileSource::Cluster => {
                let model = self.cluster_model(matrix)?;
                let clusters = (0..model.k)
                    .map(|c| model.members(c).into_iter().map(|i| model.ids[i].clone()).collect())
                    .collect();
                SelectionSet::new(Stage::Stage2, clusters, &self.config_hash, 0)
            }
        }
    }

    fn profiles(&self) -> Result<StageRecord> {
        let records = self.records()?;
        let matrix = self.matrix(&records)?;
        let selection = self.profile_selection(&matrix)?;
        let profiles = build_profiles(&selection, &matrix, |i| format!("{EXPORT_DIR}/expert_{i}.jsonl"))?;
        save_profiles(&self.path(PROFILES_DIR), &profiles)?;
        Ok(StageRecord {
            artifacts: vec![
                format!("{PROFILES_DIR}/{}", crate::router::PROFILES_JSON),
                format!("{PROFILES_DIR}/{}", crate::router::PROFILES_BIN),
            ],
            cluster_counts: profiles.iter().map(|p| p.count).collect(),
            ..Default::default()
        })
    }

    fn export(&self) -> Result<StageRecord> {
        let records = self.records()?;
        let by_id: HashMap<&str, &Record> = records.iter().map(|r| (r.id.as_str(), r)).collect();
        let selection = SelectionSet::load(&self.path(STAGE2))?;
        let dir = self.path(EXPORT_DIR);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut artifacts = Vec::new();
        for (c, ids) in selection.clusters.iter().enumerate() {
            let rel = format!("{EXPORT_DIR}/expert_{c}.jsonl");
            let rows: Vec<Record> = ids.iter().map(|id| by_id[id.as_str()].clone()).collect();
            save_corpus(self.path(&rel), &rows)?;
            artifacts.push(rel);
        }
        Ok(StageRecord {
            artifacts,
            cluster_counts: selection.counts(),
            ..Default::default()
        })
    }

    fn report(&self) -> Result<StageRecord> {
        let records = self.records()?;
        let matrix = self.matrix(&records)?;
        let model = self.cluster_model(&matrix)?;
        let stage1 = SelectionSet::load(&self.path(STAGE1))?;
        let stage2 = SelectionSet::load(&self.path(STAGE2))?;
        let profiles = load_profiles(&self.path(PROFILES_DIR))?;
        let dir = self.path(REPORT_DIR);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let bundle = build_report(&records, &matrix, &model, &stage1, &stage2, &profiles)?;
        let stage1_lines = std::fs::read_to_string(self.path(STAGE1_REPORT))
            .map_err(|e| Error::io(self.path(STAGE1_REPORT), e))?;
        let artifacts = bundle.write(&dir, &stage1_lines)?;
        let mut rec = StageRecord {
            artifacts: artifacts
                .into_iter()
                .map(|a| format!("{REPORT_DIR}/{a}"))
                .collect(),
            cluster_counts: stage2.counts(),
            ..Default::default()
        };
        rec.notes.insert("selected_fraction".into(), json!(bundle.summary["selected_fraction"]));
        rec.notes.insert("routing_consistency".into(), json!(bundle.summary["routing_consistency"]));
        Ok(rec)
    }

    /// Runs a baseline selector with `n` picks per cluster (default:
    /// `stage1_target`) and writes `baseline_<method>.jsonl`. Requires a
    /// current cluster stage; not tracked in the manifest.
    pub fn run_baseline(&mut self, method: Baseline, n: Option<usize>) -> Result<SelectionSet> {
        self.check_upstream(StageName::Stage1)?;
        let records = self.records()?;
        let matrix = self.matrix(&records)?;
        let model = self.cluster_model(&matrix)?;
        let n = n.unwrap_or(self.cfg.stage1_target);
        let (stage, label) = match method {
            Baseline::Random => (Stage::BaselineRandom, "baseline_random"),
            Baseline::KCenter => (Stage::BaselineKcenter, "baseline_kcenter"),
        };
        let seed = stage_seed(self.cfg.seed, label);
        let mut clusters = Vec::with_capacity(model.k);
        for c in 0..model.k {
            let members: Vec<String> = model.members(c).into_iter().map(|i| model.ids[i].clone()).collect();
            let picks = match method {
                Baseline::Random => random_select(&members, n, stage_seed(seed, &c.to_string())),
                Baseline::KCenter => k_center_greedy(&members, &[], n, &matrix, &model.centroids[c])?,
            };
            clusters.push(picks);
        }
        let selection = SelectionSet::new(stage, clusters, &self.config_hash, seed)?;
        selection.save(&self.path(&format!("{label}.jsonl")))?;
        Ok(selection)
    }
}

#[derive(Serialize)]
struct Stage1Line {
    cluster: usize,
    size: usize,
    knn_k: usize,
    epsilon: Option<f64>,
    minpts_init: Option<f64>,
    minpts_schedule: Vec<f64>,
    subcluster_sizes: Vec<usize>,
    balanced_sizes: Vec<usize>,
    noise: usize,
    duplicates: usize,
    selected: usize,
}

/// A-DBSCAN, sub-cluster balancing and quota sampling for one k-means
/// cluster. Returns matrix row indices.
fn stage1_for_cluster(
    matrix: &CorpusMatrix,
    members: &[usize],
    knn_k: usize,
    target: usize,
    base_seed: u64,
    cluster: usize,
) -> Result<(Vec<usize>, Value)> {
    let points: Vec<&[f64]> = members.iter().map(|&i| matrix.row(i)).collect();
    let mut line = Stage1Line {
        cluster,
        size: members.len(),
        knn_k: knn_k.min(members.len().saturating_sub(1)),
        epsilon: None,
        minpts_init: None,
        minpts_schedule: vec![],
        subcluster_sizes: vec![],
        balanced_sizes: vec![],
        noise: 0,
        duplicates: 0,
        selected: 0,
    };
    if members.len() < 2 {
        line.selected = members.len();
        return Ok((members.to_vec(), serde_json::to_value(line)?));
    }
    if line.knn_k < knn_k {
        log::warn!(
            "cluster {cluster} has only {} points; using k = {} for densities",
            members.len(),
            line.knn_k
        );
    }
    let outcome = adbscan(&points, line.knn_k)?;
    line.epsilon = Some(outcome.params.epsilon);
    line.minpts_init = Some(outcome.params.minpts_init);
    line.minpts_schedule = outcome.minpts_schedule.clone();
    line.subcluster_sizes = outcome.subclusters.iter().map(|s| s.len()).collect();
    line.noise = outcome.noise.len();
    line.duplicates = outcome.density.duplicates.len();
    let picked = if outcome.subclusters.is_empty() {
        log::warn!("cluster {cluster}: every point was classified as noise");
        Vec::new()
    } else {
        let seed = stage_seed(base_seed, &format!("{cluster}/balance"));
        let balanced = handle_subclusters(outcome.subclusters, seed)?;
        line.balanced_sizes = balanced.iter().map(|s| s.len()).collect();
        let seed = stage_seed(base_seed, &format!("{cluster}/select"));
        stage1_select(&balanced, target, seed)?
    };
    line.selected = picked.len();
    Ok((picked.into_iter().map(|i| members[i]).collect(), serde_json::to_value(line)?))
}

/// Plot-ready tables derived from a finished run.
#[derive(Debug, Clone)]
pub struct ReportBundle {
    /// `(cluster, source) -> [all, stage1, stage2]` counts.
    pub source_mix: BTreeMap<(usize, String), [usize; 3]>,
    /// `confusion[cluster][expert]` over records outside the stage-2 selection.
    pub heldout_confusion: Vec<Vec<usize>>,
    /// Per-expert fraction of its training records routed back to it.
    pub training_consistency: Vec<f64>,
    pub summary: Value,
}

pub fn build_report(
    records: &[Record],
    matrix: &CorpusMatrix,
    model: &ClusterModel,
    stage1: &SelectionSet,
    stage2: &SelectionSet,
    profiles: &[crate::router::ExpertProfile],
) -> Result<ReportBundle> {
    let k = model.k;
    let cluster_of: HashMap<&str, usize> = model
        .ids
        .iter()
        .zip(&model.assignments)
        .map(|(id, &c)| (id.as_str(), c))
        .collect();
    let s1: HashSet<&str> = stage1.clusters.iter().flatten().map(String::as_str).collect();
    let s2: HashSet<&str> = stage2.clusters.iter().flatten().map(String::as_str).collect();
    let mut source_mix: BTreeMap<(usize, String), [usize; 3]> = BTreeMap::new();
    for r in records {
        let c = cluster_of[r.id.as_str()];
        let entry = source_mix.entry((c, r.source.clone())).or_default();
        entry[0] += 1;
        entry[1] += usize::from(s1.contains(r.id.as_str()));
        entry[2] += usize::from(s2.contains(r.id.as_str()));
    }

    let mut confusion = vec![vec![0usize; profiles.len()]; k];
    let mut consistency = Vec::with_capacity(stage2.clusters.len());
    let mut own = 0usize;
    let mut trained = 0usize;
    for (c, ids) in stage2.clusters.iter().enumerate() {
        let mut hits = 0usize;
        for id in ids {
            let q = matrix.vector(id).ok_or_else(|| Error::MissingEmbeddings(vec![id.clone()]))?;
            if route(q, profiles)?.expert_id == c {
                hits += 1;
            }
        }
        own += hits;
        trained += ids.len();
        consistency.push(if ids.is_empty() { 0.0 } else { hits as f64 / ids.len() as f64 });
    }
    let mut heldout = 0usize;
    let mut heldout_hits = 0usize;
    for (i, id) in matrix.ids().iter().enumerate() {
        if s2.contains(id.as_str()) {
            continue;
        }
        let c = cluster_of[id.as_str()];
        let e = route(matrix.row(i), profiles)?.expert_id;
        confusion[c][e] += 1;
        heldout += 1;
        heldout_hits += usize::from(c == e);
    }

    let sizes = model.sizes();
    let summary = json!({
        "records": records.len(),
        "k": k,
        "cluster_sizes": sizes,
        "stage1_counts": stage1.counts(),
        "stage2_counts": stage2.counts(),
        "stage1_total": stage1.total(),
        "stage2_total": stage2.total(),
        "selected_fraction": if records.is_empty() { 0.0 } else { stage2.total() as f64 / records.len() as f64 },
        "routing_consistency": if trained == 0 { 0.0 } else { own as f64 / trained as f64 },
        "routing_consistency_per_expert": consistency,
        "heldout_records": heldout,
        "heldout_routing_accuracy": if heldout == 0 { 0.0 } else { heldout_hits as f64 / heldout as f64 },
    });
    Ok(ReportBundle {
        source_mix,
        heldout_confusion: confusion,
        training_consistency: consistency,
        summary,
    })
}

impl ReportBundle {
    /// Writes the bundle into `dir`; returns the file names written.
    pub fn write(&self, dir: &Path, stage1_report: &str) -> Result<Vec<String>> {
        let mut files = Vec::new();

        let path = dir.join("source_mix.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["cluster", "source", "all", "stage1", "stage2", "share_all", "share_stage1", "share_stage2"])?;
        let k = self.heldout_confusion.len();
        let mut totals = vec![[0usize; 3]; k];
        for ((c, _), counts) in &self.source_mix {
            for s in 0..3 {
                totals[*c][s] += counts[s];
            }
        }
        let share = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        for ((c, source), counts) in &self.source_mix {
            w.write_record([
                c.to_string(),
                source.clone(),
                counts[0].to_string(),
                counts[1].to_string(),
                counts[2].to_string(),
                share(counts[0], totals[*c][0]).to_string(),
                share(counts[1], totals[*c][1]).to_string(),
                share(counts[2], totals[*c][2]).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        files.push("source_mix.csv".to_string());

        let path = dir.join("density_histogram.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["cluster", "subcluster", "size", "balanced_size"])?;
        for line in stage1_report.lines().filter(|l| !l.trim().is_empty()) {
            let v: Value = serde_json::from_str(line)?;
            let cluster = v["cluster"].as_u64().unwrap_or_default();
            let sizes = v["subcluster_sizes"].as_array().cloned().unwrap_or_default();
            let balanced = v["balanced_sizes"].as_array().cloned().unwrap_or_default();
            for (i, s) in sizes.iter().enumerate() {
                let b = balanced.get(i).and_then(Value::as_u64).unwrap_or(0);
                w.write_record([
                    cluster.to_string(),
                    i.to_string(),
                    s.as_u64().unwrap_or(0).to_string(),
                    b.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        files.push("density_histogram.csv".to_string());

        let path = dir.join("routing_confusion.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let experts = self.heldout_confusion.first().map_or(0, Vec::len);
        let mut header = vec!["cluster".to_string()];
        header.extend((0..experts).map(|e| format!("expert_{e}")));
        w.write_record(&header)?;
        for (c, row) in self.heldout_confusion.iter().enumerate() {
            let mut rec = vec![c.to_string()];
            rec.extend(row.iter().map(usize::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        files.push("routing_confusion.csv".to_string());

        let path = dir.join("summary.json");
        std::fs::write(&path, serde_json::to_string_pretty(&self.summary)? + "\n")
            .map_err(|e| Error::io(&path, e))?;
        files.push("summary.json".to_string());
        Ok(files)
    }
}

/// Loads profiles written by the `profiles` stage of a run directory.
pub fn run_profiles(run_dir: &Path) -> Result<Vec<crate::router::ExpertProfile>> {
    load_profiles(&run_dir.join(PROFILES_DIR))
}

/// Normalized copy of `v`.
pub fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = corpus::l2_norm(v);
    if n == 0.0 {
        return Err(Error::ZeroNorm("query".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}
