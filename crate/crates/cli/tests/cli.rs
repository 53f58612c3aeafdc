use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::{json, Value};

const CLUSTERS: usize = 3;
const PER_CLUSTER: usize = 40;

fn assl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_assl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn assl")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn point(c: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; 4];
    v[c] = 1.0;
    v[3] = 0.05 * (i as f64 * 0.7).sin();
    v[(c + 1) % 3] = 0.05 * (i as f64 * 1.3).cos();
    v
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = Value>) {
    let text: String = lines.into_iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(path, text).unwrap();
}

/// Corpus, embeddings, generations and a config in a fresh directory.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let ids: Vec<(usize, usize, String)> = (0..CLUSTERS)
        .flat_map(|c| (0..PER_CLUSTER).map(move |i| (c, i, format!("c{c}-{i:02}"))))
        .collect();
    write_lines(
        &root.join("corpus.jsonl"),
        ids.iter().map(|(c, i, id)| {
            json!({ "id": id, "source": format!("s{}", i % 3), "instruction": format!("question {i} on {c}"), "output": "alpha beta gamma delta" })
        }),
    );
    write_lines(&root.join("emb.jsonl"), ids.iter().map(|(c, i, id)| json!({ "id": id, "embedding": point(*c, *i) })));
    write_lines(&root.join("raw.jsonl"), ids.iter().map(|(_, i, id)| {
        json!({ "id": id, "output": if i % 2 == 0 { "alpha beta gamma delta" } else { "alpha" } })
    }));
    write_lines(&root.join("lora.jsonl"), ids.iter().map(|(_, i, id)| {
        json!({ "id": id, "output": if i % 3 == 0 { "alpha beta" } else { "gamma" } })
    }));
    let config = root.join("config.json");
    std::fs::write(
        &config,
        json!({
            "corpus": "corpus.jsonl",
            "embeddings": { "file": "emb.jsonl" },
            "generation": { "raw": { "file": "raw.jsonl" }, "lora": { "file": "lora.jsonl" } },
            "k": CLUSTERS,
            "knn_k": 5,
            "stage1_target": 5,
            "stage2_target": 10,
            "seed": 3,
            "output_dir": "out"
        })
        .to_string(),
    )
    .unwrap();
    (dir, config)
}

#[test]
fn exit_codes() {
    let (dir, config) = workspace();
    let config = config.to_str().unwrap();

    let out = assl(&["stage1", "--config", config]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"corpus": "c", "embeddings": {"file": "e"}, "output_dir": "o", "stage1_target": 0}"#).unwrap();
    assert_eq!(code(&assl(&["run", "--config", bad.to_str().unwrap()])), 2);
    assert_eq!(code(&assl(&["run", "--config", "/nonexistent/config.json"])), 2);

    let out = assl(&["run", "--config", config]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = assl(&["run", "--config", config]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage2: up to date"));

    let run_dir = dir.path().join("out");
    assert_eq!(code(&assl(&["report", "--run", run_dir.to_str().unwrap()])), 0);
    assert!(run_dir.join("report/summary.json").exists());

    let out = assl(&["baseline", "--config", config, "--method", "kcenter", "--per-cluster", "4"]);
    assert_eq!(code(&out), 0);
    let reply: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(reply["counts"], json!([4, 4, 4]));
    assert_eq!(code(&assl(&["baseline", "--config", config, "--method", "bogus"])), 2);
}

#[test]
fn route_and_serve() {
    let (dir, config) = workspace();
    assert_eq!(code(&assl(&["run", "--config", config.to_str().unwrap()])), 0);
    let profiles = dir.path().join("out/profiles");
    let profiles = profiles.to_str().unwrap();

    // Which expert owns each planted cluster, from the export files.
    let mut expert_of = [usize::MAX; CLUSTERS];
    for e in 0..CLUSTERS {
        let text = std::fs::read_to_string(dir.path().join(format!("out/export/expert_{e}.jsonl"))).unwrap();
        let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let c: usize = first["id"].as_str().unwrap()[1..2].parse().unwrap();
        expert_of[c] = e;
    }

    let queries = dir.path().join("queries.jsonl");
    write_lines(&queries, (0..CLUSTERS).map(|c| json!({ "id": c, "embedding": point(c, 99) })));
    let out = assl(&["route", "--profiles", profiles, "--file", queries.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let decisions: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(decisions.len(), CLUSTERS);
    for (c, d) in decisions.iter().enumerate() {
        assert_eq!(d["id"], c);
        assert_eq!(d["expert_id"], expert_of[c]);
        assert_eq!(d["ranked"][0][0], expert_of[c]);
    }

    // Text needs an embedding endpoint, which the file-based config lacks.
    let out = assl(&["route", "--profiles", profiles, "--text", "hello"]);
    assert_eq!(code(&out), 2);

    let mut child = Command::new(env!("CARGO_BIN_EXE_assl"))
        .args(["serve", "--profiles", profiles])
        .env("RUST_LOG", "warn")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    {
        let stdin = child.stdin.as_mut().unwrap();
        writeln!(stdin, "{}", json!({ "id": "q1", "embedding": point(1, 7) })).unwrap();
        writeln!(stdin, "not json").unwrap();
        writeln!(stdin, "{}", json!({ "id": "q2", "text": "needs an endpoint" })).unwrap();
    }
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let lines: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["id"], "q1");
    assert_eq!(lines[0]["expert_id"], expert_of[1]);
    assert!(lines[1]["error"].is_string());
    assert_eq!(lines[2]["id"], "q2");
    assert!(lines[2]["error"].is_string());
}
