//! Drives the built binary through every command on a small cohort.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_theraloop")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/synthetic.toml")
}

#[test]
fn commands_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let cfg = config();
    let cfg = cfg.to_str().unwrap();
    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus");

    let gen = ok(&["--config", cfg, "generate", "--n", "40", "--out", &p("cohort")]);
    assert!(gen.contains("wrote 40 cases"), "{gen}");
    assert!(dir.path().join("cohort/labels.tsv").exists());
    assert!(dir.path().join("cohort/cases/S0001/notes.txt").exists());

    let kb = ok(&["ingest-kb", "--corpus", corpus.to_str().unwrap(), "--out", &p("index.json")]);
    assert!(kb.starts_with("indexed 23 documents"), "{kb}");

    let boot = ok(&["--config", cfg, "memory", "bootstrap", "--cohort", &p("cohort"), "--memory", &p("mem.jsonl")]);
    assert!(boot.contains("entries 40"), "{boot}");
    let stats = ok(&["--config", cfg, "memory", "stats", "--memory", &p("mem.jsonl")]);
    assert!(stats.contains("entries 40") && stats.contains("base_rate psa_response"), "{stats}");
    let compact = ok(&["memory", "compact", "--memory", &p("mem.jsonl")]);
    assert!(compact.contains("into 41"), "{compact}");

    let case = dir.path().join("cohort/cases/S0001");
    let pred = ok(&["--config", cfg, "predict", "--case", case.to_str().unwrap(), "--memory", &p("mem.jsonl")]);
    let preds: serde_json::Value = serde_json::from_str(&pred).unwrap();
    assert_eq!(preds.as_array().unwrap().len(), 2);

    let eval = ok(&["--config", cfg, "evaluate", "--cohort", &p("cohort"), "--folds", "3", "--out", &p("eval.json")]);
    assert!(eval.contains("patients 40") && eval.contains("gateway calls 0"), "{eval}");
    let file: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("eval.json")).unwrap()).unwrap();
    assert!(file["config_hash"].is_string() && file["cohort_manifest"].is_string());

    let abl = ok(&["--config", cfg, "ablate", "--cohort", &p("cohort")]);
    for row in ["full", "w/o multi-expert", "w/o sea-mem", "w/o evidence", "single extractor"] {
        assert!(abl.contains(row), "{abl}");
    }
}

#[test]
fn bad_mix_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["generate", "--mix", "0.6,0.3,0.3", "--out", dir.path().join("c").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
