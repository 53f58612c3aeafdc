//! Planted-topic corpus with a long-tail source mix.
//!
//! Each topic sits on its own axis; inside a topic every source occupies a
//! small 2-D Gaussian patch around its own offset, so a source's density
//! is proportional to its record count. Head sources hold most records;
//! the two tail sources ("sparse sources") hold 5%.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use assl_core::client::{write_generations, Generation};
use assl_core::corpus::{save_corpus, EmbeddingTable, Record};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use super::Stub;

pub const DIM: usize = 32;
pub const SOURCES: [(&str, f64); 6] = [
    ("head_a", 0.425),
    ("head_b", 0.300),
    ("head_c", 0.175),
    ("mid", 0.050),
    ("tail_x", 0.030),
    ("tail_y", 0.020),
];
pub const SPARSE: [&str; 2] = ["tail_x", "tail_y"];
pub const RAW_MODEL: &str = "raw-model";
pub const LORA_MODEL: &str = "lora-model";

const PATCH_SIGMA: f64 = 0.03;
const SOURCE_OFFSET: f64 = 0.3;
const WORDS: [&str; 16] = [
    "rate", "bond", "yield", "asset", "risk", "cash", "loan", "fund", "stock", "price", "tax", "audit", "ledger",
    "credit", "equity", "margin",
];

pub struct Synth {
    pub records: Vec<Record>,
    pub topic: HashMap<String, usize>,
    /// embed text → vector
    pub vectors: HashMap<String, Vec<f64>>,
    /// (model, prompt) → generated text
    pub outputs: HashMap<(String, String), String>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_unit(rng: &mut ChaCha8Rng, from: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    loop {
        let mut v = vec![0.0; DIM];
        for x in &mut v[from..] {
            *x = gaussian(rng);
        }
        for b in basis {
            let p: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(b).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn degrade(reference: &[&str], keep: f64, rng: &mut ChaCha8Rng) -> String {
    reference
        .iter()
        .map(|w| if rng.random::<f64>() < keep { *w } else { "filler" })
        .collect::<Vec<_>>()
        .join(" ")
}

/// `topics × per_topic` records, deterministic in `seed`.
pub fn generate(topics: usize, per_topic: usize, seed: u64) -> Synth {
    assert!(topics <= 6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut topic = HashMap::new();
    let mut vectors = HashMap::new();
    let mut outputs = HashMap::new();
    for t in 0..topics {
        let mut center = vec![0.0; DIM];
        center[t] = 1.0;
        let counts = source_counts(per_topic);
        for (s, &(source, _)) in SOURCES.iter().enumerate() {
            let offset = random_unit(&mut rng, 6, &[]);
            let u1 = random_unit(&mut rng, 6, std::slice::from_ref(&offset));
            let u2 = random_unit(&mut rng, 6, &[offset.clone(), u1.clone()]);
            for i in 0..counts[s] {
                let (g1, g2) = (gaussian(&mut rng), gaussian(&mut rng));
                let v: Vec<f64> = (0..DIM)
                    .map(|j| center[j] + SOURCE_OFFSET * offset[j] + PATCH_SIGMA * (g1 * u1[j] + g2 * u2[j]))
                    .collect();
                let id = format!("t{t}-{source}-{i}");
                let reference: Vec<&str> = (0..12).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
                let record = Record {
                    id: id.clone(),
                    source: source.to_string(),
                    instruction: format!("Explain item {i} of topic {t} as written in {source}."),
                    input: if i % 3 == 0 { String::new() } else { format!("context {}", rng.random::<u32>()) },
                    output: reference.join(" "),
                };
                let prompt = record.embed_text();
                let raw_keep = rng.random_range(0.3..0.9);
                let lora_keep = rng.random_range(0.3..0.9);
                outputs.insert((RAW_MODEL.to_string(), prompt.clone()), degrade(&reference, raw_keep, &mut rng));
                outputs.insert((LORA_MODEL.to_string(), prompt.clone()), degrade(&reference, lora_keep, &mut rng));
                vectors.insert(prompt, v);
                topic.insert(id, t);
                records.push(record);
            }
        }
    }
    Synth {
        records,
        topic,
        vectors,
        outputs,
    }
}

/// Source sizes for one topic; the remainder goes to the largest source.
pub fn source_counts(per_topic: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = SOURCES.iter().map(|(_, f)| (f * per_topic as f64).floor() as usize).collect();
    counts[0] += per_topic - counts.iter().sum::<usize>();
    counts
}

impl Synth {
    pub fn sparse_ids(&self) -> HashSet<&str> {
        self.records
            .iter()
            .filter(|r| SPARSE.contains(&r.source.as_str()))
            .map(|r| r.id.as_str())
            .collect()
    }

    pub fn write_corpus(&self, path: &Path) {
        save_corpus(path, &self.records).unwrap();
    }

    /// Precomputed embeddings keyed by record id.
    pub fn write_embeddings(&self, path: &Path) {
        let mut table = EmbeddingTable::new();
        for r in &self.records {
            table.insert(r.id.clone(), self.vectors[&r.embed_text()].clone()).unwrap();
        }
        table.save_binary(path).unwrap();
    }

    /// Precomputed generations for `model`.
    pub fn write_generations(&self, model: &str, path: &Path) {
        let gens: Vec<(String, Generation)> = self
            .records
            .iter()
            .map(|r| {
                let text = self.outputs[&(model.to_string(), r.embed_text())].clone();
                (r.id.clone(), Generation::Text(text))
            })
            .collect();
        write_generations(path, gens.iter().map(|(id, g)| (id.as_str(), g))).unwrap();
    }

    /// Stub embedding + completion service backed by this corpus.
    pub fn serve(self: &Arc<Self>) -> Stub {
        let synth = self.clone();
        Stub::start(move |path, body| match path {
            "/embeddings" => {
                let mut data = Vec::new();
                for (i, t) in body["input"].as_array().unwrap().iter().enumerate() {
                    match synth.vectors.get(t.as_str().unwrap()) {
                        Some(v) => data.push(json!({ "index": i, "embedding": v })),
                        None => return (400, json!({ "error": "unknown text" })),
                    }
                }
                (200, json!({ "data": data }))
            }
            "/completions" => {
                let key = (
                    body["model"].as_str().unwrap_or_default().to_string(),
                    body["prompt"].as_str().unwrap_or_default().to_string(),
                );
                match synth.outputs.get(&key) {
                    Some(text) => (200, json!({ "choices": [{ "text": text }] })),
                    None => (404, json!({ "error": "unknown prompt" })),
                }
            }
            _ => (404, json!({})),
        })
    }
}
