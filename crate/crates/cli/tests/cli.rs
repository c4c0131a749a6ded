use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use specdec::distributions::{TokenId, Vocab};
use specdec::lm::{load_model, parse_byte_corpus, KGramModel, LanguageModel};
use specdec::metrics::CostModel;
use tempfile::TempDir;

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/corpus.txt")
}

fn specdec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specdec")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = specdec(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Target and draft fitted on the test corpus, plus a config for them.
fn workspace() -> TempDir {
    let dir = TempDir::new().unwrap();
    let c = corpus();
    ok(dir.path(), &["fit-lm", "--corpus", c.to_str().unwrap(), "--out", "t.json", "--draft-out", "d.json"]);
    let cfg = serde_json::json!({
        "target": "t.json",
        "draft": "d.json",
        "prompts": c,
        "prompt_len": 3,
        "generations": 40,
        "max_len": 60,
        "k_grid": [2, 6],
        "h_grid": [0.3, 0.8],
        "w_rej_grid": [1.0],
        "depth_grid": [1],
        "train": { "epochs": 1, "width": 8 },
        "policies": ["fixed:3", "confidence:c=0.5", "adaptive-oracle:h=0.5"],
    });
    fs::write(dir.path().join("run.json"), cfg.to_string()).unwrap();
    dir
}

#[test]
fn byte_corpus_gives_a_256_token_model_that_round_trips() {
    let dir = TempDir::new().unwrap();
    let c = corpus();
    let out = ok(dir.path(), &["fit-lm", "--corpus", c.to_str().unwrap(), "--order", "0", "--out", "u.json"]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["vocab_size"], 256);

    let loaded = load_model(dir.path().join("u.json")).unwrap();
    let lines = parse_byte_corpus(&fs::read(&c).unwrap());
    let fitted = KGramModel::fit(&lines, Vocab::bytes(), 0, 0.01).unwrap();
    assert_eq!(loaded.context_order(), 0);
    for ctx in [vec![], vec![TokenId(65)], lines[0][..5].to_vec()] {
        assert_eq!(loaded.next_dist(&ctx), fitted.next_dist(&ctx));
        // Unigram: context is ignored.
        assert_eq!(loaded.next_dist(&ctx), loaded.next_dist(&[]));
    }
}

#[test]
fn token_corpus_needs_an_eos() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("c.txt"), "0 1 2\n1 2 2\n").unwrap();
    let out = specdec(dir.path(), &["fit-lm", "--corpus", "c.txt", "--format", "tokens", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ok(dir.path(), &["fit-lm", "--corpus", "c.txt", "--format", "tokens", "--eos", "2", "--out", "m.json"]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["vocab_size"], 3);
}

#[test]
fn bench_is_byte_identical_across_runs_and_thread_counts() {
    let dir = workspace();
    let run = |threads: &str, out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_specdec"))
            .current_dir(dir.path())
            .env("SPECDEC_THREADS", threads)
            .args(["bench", "--config", "run.json", "--out", out])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(dir.path().join(out)).unwrap()
    };
    let a = run("1", "a.csv");
    assert_eq!(a, run("1", "b.csv"));
    assert_eq!(a, run("4", "c.csv"));
}

#[derive(serde::Deserialize)]
struct Row {
    policy: String,
    params: String,
    discard_rate: f64,
    verification_rate: f64,
    latency: f64,
    throughput: f64,
    speedup: f64,
}

#[test]
fn bench_rows_are_consistent_with_the_cost_model() {
    let dir = workspace();
    let out = ok(dir.path(), &["bench", "--config", "run.json", "--out", "b.csv", "--t-draft", "0.01"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("adaptive-oracle"), "oracle policy is flagged");
    let cm = CostModel::new(0.01, 0.112).unwrap();
    let rows: Vec<Row> = csv::Reader::from_path(dir.path().join("b.csv"))
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(rows.len(), 3);
    let mut keys: Vec<_> = rows.iter().map(|r| (r.policy.clone(), r.params.clone())).collect();
    let unsorted = keys.clone();
    keys.sort();
    assert_eq!(keys, unsorted);
    for r in &rows {
        let latency = cm.latency_from_rates(r.discard_rate, r.verification_rate);
        assert!((r.latency - latency).abs() <= 1e-12 * latency);
        assert!((r.throughput * r.latency - 1.0).abs() < 1e-12);
        assert!((r.speedup - 0.112 / r.latency).abs() < 1e-9);
        assert!(r.verification_rate > 0.0 && r.verification_rate <= 1.0);
    }

    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("b.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["t_draft"], 0.01, "effective config is echoed");
    assert_eq!(summary["generations"], 40);
    let results = summary["results"].as_array().unwrap();
    assert_eq!(results.iter().filter(|r| r["oracle"] == true).count(), 1);
    assert_eq!(results[0]["per_trace"]["traces"], 40);
}

#[test]
fn data_training_and_sweep_pipeline() {
    let dir = workspace();
    ok(dir.path(), &["gen-data", "--config", "run.json", "--r", "20", "--out", "data.jsonl"]);
    let n = fs::read_to_string(dir.path().join("data.jsonl")).unwrap().lines().count();
    assert!(n > 100);

    let out = ok(dir.path(), &["train-head", "--data", "data.jsonl", "--depth", "1", "--epochs", "1", "--out", "h.json"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["report"]["train_loss"].as_f64().unwrap().is_finite());

    ok(dir.path(), &["sweep", "--config", "run.json", "--data", "data.jsonl", "--out", "s.csv"]);
    let csv = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    // header + 2 fixed + 1 head × 2 thresholds
    assert_eq!(csv.lines().count(), 5);
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("s.json")).unwrap()).unwrap();
    assert!(!summary["pareto"].as_array().unwrap().is_empty());

    ok(dir.path(), &["sweep", "--config", "run.json", "--head", "h.json", "--out", "s2.csv"]);
    assert_eq!(fs::read_to_string(dir.path().join("s2.csv")).unwrap().lines().count(), 5);
}

#[test]
fn oracle_battery_passes() {
    let dir = TempDir::new().unwrap();
    let out = ok(dir.path(), &["oracle-check", "--out", "o.csv"]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["passed"], true);
    assert_eq!(summary["threshold_violations"], 0);
    assert!(summary["condition_fired"].as_u64().unwrap() > 0);
    let rows = fs::read_to_string(dir.path().join("o.csv")).unwrap().lines().count() - 1;
    assert_eq!(rows as u64, summary["threshold_states"].as_u64().unwrap());
}

#[test]
fn bad_inputs_exit_nonzero_with_a_message() {
    let dir = workspace();
    for args in [
        vec!["bench", "--config", "run.json", "--target", "missing.json", "--out", "x.csv"],
        vec!["bench", "--config", "run.json", "--policy", "fixed:0", "--out", "x.csv"],
        vec!["bench", "--config", "nope.json", "--out", "x.csv"],
        vec!["bench", "--config", "run.json", "--policy", "oracle-greedy", "--out", "x.csv"],
    ] {
        let out = specdec(dir.path(), &args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("error: "), "{args:?}");
    }
}

#[test]
fn unknown_config_fields_are_rejected() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"sead": 3}"#).unwrap();
    let out = specdec(dir.path(), &["oracle-check", "--config", "c.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn single_generation_pooled_rates_equal_per_trace_rates() {
    let dir = workspace();
    ok(dir.path(), &["bench", "--config", "run.json", "--generations", "1", "--policy", "fixed:3", "--out", "one.csv"]);
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("one.json")).unwrap()).unwrap();
    let r = &summary["results"][0];
    assert_eq!(r["discard_rate"], r["per_trace"]["discard_rate"]["mean"]);
}
