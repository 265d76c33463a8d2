mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lmar::llm::{compute_tcdt, TokenLedger};
use serde_json::Value;

use common::copy_pipeline_fixture;

fn lmar(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmar"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("out/report.json")).unwrap()).unwrap()
}

#[test]
fn pipeline_runs_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = copy_pipeline_fixture(dir.path());
    let out = lmar(&["pipeline"], &cfg);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    for stage in lmar::pipeline::STAGES {
        assert!(text.contains(&format!("{stage}: done")), "{text}");
    }
    let r = report(dir.path());
    assert_eq!(r["validators"]["valid"], true);

    // Nothing changed: every stage is skipped.
    let out = lmar(&["pipeline", "--resume"], &cfg);
    assert_eq!(out.status.code(), Some(0));
    assert!(!stdout(&out).contains(": done"), "{}", stdout(&out));

    // Losing the report reruns only the stages that write it.
    fs::remove_file(dir.path().join("out/report.json")).unwrap();
    let out = lmar(&["pipeline", "--resume"], &cfg);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let done: Vec<&str> = text
        .lines()
        .filter_map(|l| l.strip_suffix(": done"))
        .collect();
    assert_eq!(done, vec!["evaluate", "report"]);
    assert_eq!(report(dir.path()), r);
}

#[test]
fn runs_are_reproducible_across_directories() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let cfg = copy_pipeline_fixture(d.path());
        assert_eq!(lmar(&["pipeline"], &cfg).status.code(), Some(0));
    }
    for f in ["report.json", "clusters.json", "triplets.jsonl", "qepairs.jsonl", "adapter_qe.lmad"] {
        assert_eq!(
            fs::read(a.path().join("out").join(f)).unwrap(),
            fs::read(b.path().join("out").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn report_ledger_matches_tcdt() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = copy_pipeline_fixture(dir.path());
    assert_eq!(lmar(&["pipeline"], &cfg).status.code(), Some(0));
    let r = report(dir.path());
    let ledger: TokenLedger = serde_json::from_value(r["ledger"].clone()).unwrap();
    assert_eq!(ledger.document_tokens, r["corpus"]["document_tokens"].as_u64().unwrap());
    let per_stage: u64 = ledger.per_stage.values().map(|u| u.input_tokens + u.output_tokens).sum();
    assert_eq!(per_stage, ledger.input_tokens + ledger.output_tokens);
    let tcdt = r["ledger"]["tcdt"].as_f64().unwrap();
    assert!((tcdt - compute_tcdt(&ledger).unwrap()).abs() < 1e-12);
}

#[test]
fn zero_epochs_keeps_baseline_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = copy_pipeline_fixture(dir.path());
    let toml = fs::read_to_string(&cfg).unwrap().replace("max_epochs = 5", "max_epochs = 0");
    fs::write(&cfg, toml).unwrap();
    let out = lmar(&["pipeline"], &cfg);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let m = &report(dir.path())["metrics"];
    for key in ["accuracy", "mrr", "tf_score"] {
        assert_eq!(m["baseline"][key], m["adapted"][key], "{key}");
    }
    let (b, a) = (m["baseline"]["avg_similarity"].as_f64().unwrap(), m["adapted"]["avg_similarity"].as_f64().unwrap());
    assert!((a - b).abs() < 1e-9);
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = copy_pipeline_fixture(dir.path());
    let toml = fs::read_to_string(&cfg).unwrap() + "\n[clustering]\ndelta = 1.5\n";
    fs::write(&cfg, toml).unwrap();
    let out = lmar(&["pipeline"], &cfg);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let missing = dir.path().join("nope.toml");
    assert_eq!(lmar(&["pipeline"], &missing).status.code(), Some(2));
}

#[test]
fn broken_partition_fails_the_report_gate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = copy_pipeline_fixture(dir.path());
    assert_eq!(lmar(&["pipeline"], &cfg).status.code(), Some(0));
    let path = dir.path().join("out/clusters.json");
    let mut clusters: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    // Put paragraph 0 in a second cluster.
    let list = clusters["clusters"].as_array_mut().unwrap();
    let owner = list
        .iter()
        .position(|c| c["member_ids"].as_array().unwrap().contains(&Value::from(0)))
        .unwrap();
    let other = (owner + 1) % list.len();
    assert_ne!(owner, other, "fixture needs two clusters");
    list[other]["member_ids"].as_array_mut().unwrap().push(0.into());
    list[other]["similarities"].as_array_mut().unwrap().push(1.0.into());
    fs::write(&path, clusters.to_string()).unwrap();

    let out = lmar(&["report"], &cfg);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("INVARIANT_VIOLATION"));
    assert_eq!(report(dir.path())["validators"]["valid"], false);
}

#[test]
fn single_stage_needs_its_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = copy_pipeline_fixture(dir.path());
    let out = lmar(&["cluster"], &cfg);
    assert_ne!(out.status.code(), Some(0));
    assert_eq!(lmar(&["ingest"], &cfg).status.code(), Some(0));
    assert!(dir.path().join("out/corpus.store.jsonl").is_file());
}
