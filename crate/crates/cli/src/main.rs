use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use assl_core::client::{EmbeddingClient, EndpointConfig};
use assl_core::pipeline::{self, Baseline, Pipeline, PipelineConfig, Source, StageName, StageStatus};
use assl_core::router::{route, ExpertProfile};
use assl_core::Error;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "assl", version, about = "Adaptive semantic-space data selection and expert routing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct QuerySource {
    /// Expert profile directory (a run's `profiles/`).
    #[arg(long)]
    profiles: PathBuf,
    /// Embedding endpoint config (JSON) used to embed query text.
    #[arg(long, conflicts_with = "config")]
    endpoint: Option<PathBuf>,
    /// Pipeline config whose embedding endpoint embeds query text.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    Ingest(ConfigArg),
    Embed(ConfigArg),
    Cluster(ConfigArg),
    Stage1(ConfigArg),
    Generate(ConfigArg),
    Score(ConfigArg),
    Stage2(ConfigArg),
    Profiles(ConfigArg),
    Export(ConfigArg),
    /// Run the report stage, from a config or an existing run directory.
    Report {
        #[arg(long, required_unless_present = "run", conflicts_with = "run")]
        config: Option<PathBuf>,
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Run every stage in order, skipping those already current.
    Run(ConfigArg),
    /// Select with a baseline method instead of the density/score stages.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        /// `random` or `kcenter`.
        #[arg(long)]
        method: String,
        /// Records per cluster (default: stage1_target).
        #[arg(long)]
        per_cluster: Option<usize>,
    },
    /// Route one query text, or a JSONL file of queries, to an expert.
    Route {
        #[command(flatten)]
        source: QuerySource,
        #[arg(long, required_unless_present = "file", conflicts_with = "file")]
        text: Option<String>,
        /// JSONL lines of `{"id", "text"}` or `{"id", "embedding"}`.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Read JSONL queries on stdin and write one decision per line.
    Serve {
        #[command(flatten)]
        source: QuerySource,
    },
}

#[derive(Deserialize)]
struct Query {
    #[serde(default)]
    id: Option<serde_json::Value>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    embedding: Option<Vec<f64>>,
}

struct Router {
    profiles: Vec<ExpertProfile>,
    embedder: Option<EmbeddingClient>,
}

impl Router {
    fn open(source: &QuerySource) -> anyhow::Result<Self> {
        let profiles = assl_core::router::load_profiles(&source.profiles)?;
        let endpoint = match (&source.endpoint, &source.config) {
            (Some(path), _) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                Some(
                    serde_json::from_str::<EndpointConfig>(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
                )
            }
            (None, Some(path)) => match PipelineConfig::load(path)?.embeddings {
                Source::Endpoint(e) => Some(e),
                Source::File(_) => None,
            },
            (None, None) => None,
        };
        let embedder = endpoint.map(EmbeddingClient::new).transpose()?;
        Ok(Self { profiles, embedder })
    }

    fn embed(&self, texts: &[String]) -> anyhow::Result<Vec<Vec<f64>>> {
        let client = self.embedder.as_ref().ok_or_else(|| {
            Error::Config("query text needs an embedding endpoint (--endpoint or --config)".into())
        })?;
        Ok(client.embed_batch(texts)?)
    }

    fn decide(&self, id: Option<serde_json::Value>, vector: &[f64]) -> anyhow::Result<serde_json::Value> {
        let decision = route(&pipeline::unit(vector)?, &self.profiles)?;
        let mut value = serde_json::to_value(decision)?;
        if let Some(id) = id {
            value["id"] = id;
        }
        Ok(value)
    }

    fn queries(&self, queries: Vec<Query>) -> anyhow::Result<Vec<serde_json::Value>> {
        let texts: Vec<String> = queries
            .iter()
            .filter(|q| q.embedding.is_none())
            .map(|q| q.text.clone().ok_or_else(|| Error::InvalidArgument("query has neither text nor embedding".into())))
            .collect::<Result<_, _>>()?;
        let mut embedded = if texts.is_empty() { Vec::new() } else { self.embed(&texts)? }.into_iter();
        queries
            .into_iter()
            .map(|q| {
                let v = match q.embedding {
                    Some(v) => v,
                    None => embedded.next().expect("one vector per text"),
                };
                self.decide(q.id, &v)
            })
            .collect()
    }
}

fn read_queries(path: &Path) -> anyhow::Result<Vec<Query>> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() }.into())
        })
        .collect()
}

fn run_stage(config: &Path, stage: StageName) -> anyhow::Result<()> {
    let mut p = Pipeline::open(PipelineConfig::load(config)?)?;
    match p.run_stage(stage)? {
        StageStatus::Ran => eprintln!("{stage}: done"),
        StageStatus::UpToDate => eprintln!("{stage}: up to date"),
    }
    Ok(())
}

fn serve(router: &Router) -> anyhow::Result<()> {
    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Query>(&line) {
            Ok(q) => {
                let id = q.id.clone();
                router
                    .queries(vec![q])
                    .map(|mut v| v.remove(0))
                    .unwrap_or_else(|e| json!({ "id": id, "error": format!("{e:#}") }))
            }
            Err(e) => json!({ "error": e.to_string() }),
        };
        writeln!(out, "{reply}")?;
        out.flush()?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest(c) => run_stage(&c.config, StageName::Ingest),
        Command::Embed(c) => run_stage(&c.config, StageName::Embed),
        Command::Cluster(c) => run_stage(&c.config, StageName::Cluster),
        Command::Stage1(c) => run_stage(&c.config, StageName::Stage1),
        Command::Generate(c) => run_stage(&c.config, StageName::Generate),
        Command::Score(c) => run_stage(&c.config, StageName::Score),
        Command::Stage2(c) => run_stage(&c.config, StageName::Stage2),
        Command::Profiles(c) => run_stage(&c.config, StageName::Profiles),
        Command::Export(c) => run_stage(&c.config, StageName::Export),
        Command::Report { config, run } => {
            let config = config.unwrap_or_else(|| run.expect("clap").join(pipeline::RESOLVED_CONFIG));
            run_stage(&config, StageName::Report)
        }
        Command::Run(c) => {
            let mut p = Pipeline::open(PipelineConfig::load(&c.config)?)?;
            for stage in StageName::ALL {
                let status = p.run_stage(stage)?;
                eprintln!("{stage}: {}", if status == StageStatus::Ran { "done" } else { "up to date" });
            }
            Ok(())
        }
        Command::Baseline { config, method, per_cluster } => {
            let method: Baseline = method.parse()?;
            let mut p = Pipeline::open(PipelineConfig::load(&config)?)?;
            let selection = p.run_baseline(method, per_cluster)?;
            println!("{}", json!({ "stage": selection.stage, "counts": selection.counts() }));
            Ok(())
        }
        Command::Route { source, text, file } => {
            let router = Router::open(&source)?;
            let queries = match (text, file) {
                (Some(text), _) => vec![Query { id: None, text: Some(text), embedding: None }],
                (None, Some(file)) => read_queries(&file)?,
                (None, None) => unreachable!("clap requires one"),
            };
            let mut out = std::io::stdout().lock();
            for d in router.queries(queries)? {
                writeln!(out, "{d}")?;
            }
            Ok(())
        }
        Command::Serve { source } => serve(&Router::open(&source)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(1, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
