//! Blocking HTTP clients for an embedding endpoint and a text-completion
//! endpoint, both speaking the common OpenAI-style JSON shapes:
//!
//! ```text
//! POST {base_url}/embeddings   {"model": m, "input": [texts]}
//!   -> {"data": [{"index": i, "embedding": [..]}, ..]}
//! POST {base_url}/completions  {"model": m, "prompt": p, "temperature": t, "max_tokens": n}
//!   -> {"choices": [{"text": ".."}]}
//! ```
//!
//! Transient failures (connection errors, timeouts, 429, 5xx) are retried
//! with exponential backoff. Completions are cached on disk keyed by model
//! tag, record id and a SHA-256 of the prompt.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_API_KEY_ENV: &str = "ASSL_API_KEY";

fn default_timeout() -> f64 {
    60.0
}
fn default_max_batch() -> usize {
    64
}
fn default_max_retries() -> u32 {
    3
}
fn default_in_flight() -> usize {
    4
}
fn default_backoff_ms() -> u64 {
    250
}
fn default_max_tokens() -> u32 {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    /// Decoding settings for completions; greedy by default.
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: None,
            timeout_secs: default_timeout(),
            max_batch: default_max_batch(),
            max_retries: default_max_retries(),
            max_in_flight: default_in_flight(),
            backoff_ms: default_backoff_ms(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0) {
            return Err(Error::Config("endpoint timeout must be positive".into()));
        }
        if self.max_batch == 0 {
            return Err(Error::Config("endpoint max_batch must be at least 1".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("endpoint max_in_flight must be at least 1".into()));
        }
        if self.base_url.is_empty() {
            return Err(Error::Config("endpoint base_url is empty".into()));
        }
        Ok(())
    }

    fn api_key(&self) -> Option<String> {
        let var = self.api_key_env.as_deref().unwrap_or(DEFAULT_API_KEY_ENV);
        std::env::var(var).ok().filter(|k| !k.is_empty())
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.base_url.trim_end_matches('/'))
    }
}

enum Attempt<T> {
    Done(T),
    Retry(String),
    Fail(Error),
}

struct Http {
    client: Client,
    cfg: EndpointConfig,
    api_key: Option<String>,
}

impl Http {
    fn new(cfg: EndpointConfig) -> Result<Self> {
        cfg.validate()?;
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let api_key = cfg.api_key();
        Ok(Self {
            client,
            cfg,
            api_key,
        })
    }

    fn post_once(&self, path: &str, body: &serde_json::Value) -> Attempt<serde_json::Value> {
        let mut req = self.client.post(self.cfg.url(path)).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status();
        if status.is_success() {
            return match resp.json::<serde_json::Value>() {
                Ok(v) => Attempt::Done(v),
                Err(e) => Attempt::Fail(Error::Protocol(format!("undecodable response: {e}"))),
            };
        }
        let text = resp.text().unwrap_or_default();
        let message = format!("HTTP {status}: {}", text.chars().take(200).collect::<String>());
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            Attempt::Retry(message)
        } else {
            Attempt::Fail(Error::Service(message))
        }
    }

    /// POST with retries; the last transient message becomes a transport error.
    fn post(&self, path: &str, body: &serde_json::Value) -> Result<serde_json::Value> {
        let mut attempt = 0u32;
        loop {
            match self.post_once(path, body) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(msg) if attempt >= self.cfg.max_retries => {
                    return Err(Error::Transport(format!(
                        "{msg} (after {} attempt(s))",
                        attempt + 1
                    )))
                }
                Attempt::Retry(msg) => {
                    let delay = self.cfg.backoff_ms.saturating_mul(1 << attempt.min(16));
                    log::debug!("retrying {path} in {delay} ms: {msg}");
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
            }
        }
    }
}

/// Runs `f` over `0..n` on up to `workers` threads; results keep index order.
fn run_indexed<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.min(n).max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots.lock().expect("poisoned")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("poisoned")
        .into_iter()
        .map(|s| s.expect("every index ran"))
        .collect()
}

pub struct EmbeddingClient {
    http: Http,
}

impl EmbeddingClient {
    pub fn new(cfg: EndpointConfig) -> Result<Self> {
        Ok(Self {
            http: Http::new(cfg)?,
        })
    }

    fn embed_chunk(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let body = json!({ "model": self.http.cfg.model, "input": texts });
        let value = self.http.post("embeddings", &body)?;
        #[derive(Deserialize)]
        struct Item {
            #[serde(default)]
            index: Option<usize>,
            embedding: Vec<f64>,
        }
        #[derive(Deserialize)]
        struct Response {
            data: Vec<Item>,
        }
        let resp: Response =
            serde_json::from_value(value).map_err(|e| Error::Protocol(format!("embedding response: {e}")))?;
        if resp.data.len() != texts.len() {
            return Err(Error::Protocol(format!(
                "requested {} embeddings, received {}",
                texts.len(),
                resp.data.len()
            )));
        }
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        for (pos, item) in resp.data.into_iter().enumerate() {
            let i = item.index.unwrap_or(pos);
            if i >= texts.len() || slots[i].is_some() {
                return Err(Error::Protocol(format!("bad or repeated embedding index {i}")));
            }
            slots[i] = Some(item.embedding);
        }
        Ok(slots.into_iter().map(|s| s.expect("filled")).collect())
    }

    /// One vector per text, in input order. Larger inputs are split into
    /// requests of at most `max_batch` texts.
    pub fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let chunks: Vec<&[String]> = texts.chunks(self.http.cfg.max_batch).collect();
        let results = run_indexed(chunks.len(), self.http.cfg.max_in_flight, |i| {
            self.embed_chunk(chunks[i])
        });
        let mut out = Vec::with_capacity(texts.len());
        for r in results {
            out.extend(r?);
        }
        if let Some(d) = out.first().map(Vec::len) {
            if let Some(bad) = out.iter().position(|v| v.len() != d) {
                return Err(Error::Protocol(format!(
                    "embedding {bad} has dimension {}, expected {d}",
                    out[bad].len()
                )));
            }
            if d == 0 {
                return Err(Error::Protocol("empty embedding vectors".into()));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTag {
    Raw,
    Lora,
}

impl ModelTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelTag::Raw => "raw",
            ModelTag::Lora => "lora",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionRequest {
    pub record_id: String,
    pub prompt: String,
    pub model_tag: ModelTag,
}

/// Outcome of one generation: the text, or the reason it permanently failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Generation {
    Text(String),
    Failed(String),
}

impl Generation {
    pub fn text(&self) -> Option<&str> {
        match self {
            Generation::Text(t) => Some(t),
            Generation::Failed(_) => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct GenerationLine {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Reads `{"id": .., "output": ..}` lines; lines carrying `"error"` instead
/// are read as failed generations.
pub fn read_generations(path: &Path) -> Result<HashMap<String, Generation>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: GenerationLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let generation = match (parsed.output, parsed.error) {
            (Some(o), _) => Generation::Text(o),
            (None, Some(e)) => Generation::Failed(e),
            (None, None) => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "neither output nor error".into(),
                })
            }
        };
        out.insert(parsed.id, generation);
    }
    Ok(out)
}

/// Writes generations in the given id order.
pub fn write_generations<'a>(
    path: &Path,
    rows: impl IntoIterator<Item = (&'a str, &'a Generation)>,
) -> Result<()> {
    let mut text = String::new();
    for (id, g) in rows {
        let line = match g {
            Generation::Text(t) => GenerationLine {
                id: id.to_string(),
                output: Some(t.clone()),
                error: None,
            },
            Generation::Failed(e) => GenerationLine {
                id: id.to_string(),
                output: None,
                error: Some(e.clone()),
            },
        };
        text.push_str(&serde_json::to_string(&line)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn prompt_hash(prompt: &str) -> String {
    let digest = Sha256::digest(prompt.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheLine {
    model_tag: ModelTag,
    record_id: String,
    prompt_hash: String,
    output: String,
}

type CacheKey = (ModelTag, String, String);

/// Append-only line-delimited JSON cache of successful completions.
#[derive(Debug)]
pub struct CompletionCache {
    path: PathBuf,
    entries: HashMap<CacheKey, String>,
}

impl CompletionCache {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut entries = HashMap::new();
        if path.exists() {
            let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                // A torn final line from an interrupted run is skipped.
                if let Ok(c) = serde_json::from_str::<CacheLine>(&line) {
                    entries.insert((c.model_tag, c.record_id, c.prompt_hash), c.output);
                }
            }
        }
        Ok(Self { path, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn key(req: &CompletionRequest) -> CacheKey {
        (req.model_tag, req.record_id.clone(), prompt_hash(&req.prompt))
    }

    pub fn get(&self, req: &CompletionRequest) -> Option<&str> {
        self.entries.get(&Self::key(req)).map(String::as_str)
    }

    fn extend(&mut self, new: Vec<(CacheKey, String)>) -> Result<()> {
        if new.is_empty() {
            return Ok(());
        }
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        let mut text = String::new();
        for ((model_tag, record_id, prompt_hash), output) in &new {
            text.push_str(&serde_json::to_string(&CacheLine {
                model_tag: *model_tag,
                record_id: record_id.clone(),
                prompt_hash: prompt_hash.clone(),
                output: output.clone(),
            })?);
            text.push('\n');
        }
        file.write_all(text.as_bytes())
            .map_err(|e| Error::io(&self.path, e))?;
        self.entries.extend(new);
        Ok(())
    }
}

pub struct CompletionClient {
    http: Http,
}

impl CompletionClient {
    pub fn new(cfg: EndpointConfig) -> Result<Self> {
        Ok(Self {
            http: Http::new(cfg)?,
        })
    }

    fn complete_one(&self, prompt: &str) -> Result<String> {
        let cfg = &self.http.cfg;
        let body = json!({
            "model": cfg.model,
            "prompt": prompt,
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_tokens,
        });
        let value = self.http.post("completions", &body)?;
        value
            .get("choices")
            .and_then(|c| c.get(0))
            .and_then(|c| c.get("text"))
            .and_then(|t| t.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Protocol("completion response lacks choices[0].text".into()))
    }

    /// Generates text for every request. Cached outputs are reused; failures
    /// after retries are reported per id as [`Generation::Failed`].
    pub fn complete_batch(
        &self,
        requests: &[CompletionRequest],
        cache: Option<&mut CompletionCache>,
    ) -> Result<BTreeMap<String, Generation>> {
        let mut seen = HashSet::new();
        for r in requests {
            if !seen.insert(r.record_id.as_str()) {
                return Err(Error::invalid(format!("duplicate record id {:?}", r.record_id)));
            }
            if r.prompt.is_empty() {
                return Err(Error::invalid(format!("empty prompt for {:?}", r.record_id)));
            }
        }
        let mut results = BTreeMap::new();
        let mut pending = Vec::new();
        for r in requests {
            match cache.as_deref().and_then(|c| c.get(r)) {
                Some(hit) => {
                    results.insert(r.record_id.clone(), Generation::Text(hit.to_string()));
                }
                None => pending.push(r),
            }
        }
        let outcomes = run_indexed(pending.len(), self.http.cfg.max_in_flight, |i| {
            self.complete_one(&pending[i].prompt)
        });
        let mut fresh = Vec::new();
        for (req, outcome) in pending.into_iter().zip(outcomes) {
            let generation = match outcome {
                Ok(text) => {
                    fresh.push((CompletionCache::key(req), text.clone()));
                    Generation::Text(text)
                }
                Err(e) => {
                    log::warn!("generation for {} failed: {e}", req.record_id);
                    Generation::Failed(e.to_string())
                }
            };
            results.insert(req.record_id.clone(), generation);
        }
        if let Some(cache) = cache {
            cache.extend(fresh)?;
        }
        Ok(results)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut cfg = EndpointConfig::new("http://localhost:1", "m");
        assert!(cfg.validate().is_ok());
        cfg.max_batch = 0;
        assert!(cfg.validate().is_err());
        cfg.max_batch = 1;
        cfg.timeout_secs = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_defaults_from_json() {
        let cfg: EndpointConfig =
            serde_json::from_str(r#"{"base_url": "http://x", "model": "enc"}"#).unwrap();
        assert_eq!(cfg.max_batch, 64);
        assert_eq!(cfg.temperature, 0.0);
        assert_eq!(cfg.url("embeddings"), "http://x/embeddings");
    }

    #[test]
    fn duplicate_request_ids_rejected() {
        let client = CompletionClient::new(EndpointConfig::new("http://127.0.0.1:9", "m")).unwrap();
        let req = CompletionRequest {
            record_id: "a".into(),
            prompt: "p".into(),
            model_tag: ModelTag::Raw,
        };
        let err = client.complete_batch(&[req.clone(), req], None).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn generations_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.jsonl");
        let ok = Generation::Text("fine".into());
        let bad = Generation::Failed("HTTP 500".into());
        write_generations(&path, [("a", &ok), ("b", &bad)]).unwrap();
        let read = read_generations(&path).unwrap();
        assert_eq!(read["a"], ok);
        assert_eq!(read["b"], bad);
    }

    #[test]
    fn cache_persists_entries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache/completions.jsonl");
        let req = CompletionRequest {
            record_id: "r".into(),
            prompt: "hello".into(),
            model_tag: ModelTag::Lora,
        };
        let mut cache = CompletionCache::open(&path).unwrap();
        cache
            .extend(vec![(CompletionCache::key(&req), "out".into())])
            .unwrap();
        let reopened = CompletionCache::open(&path).unwrap();
        assert_eq!(reopened.get(&req), Some("out"));
        let other = CompletionRequest {
            prompt: "changed".into(),
            ..req
        };
        assert_eq!(reopened.get(&other), None);
    }

    #[test]
    fn run_indexed_keeps_order() {
        let out = run_indexed(100, 7, |i| i * 2);
        assert_eq!(out, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }
}
