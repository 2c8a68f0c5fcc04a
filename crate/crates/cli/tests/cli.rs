use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use degm_cli::report::{EvalReport, RunReport, METRICS_HEADER};

fn degm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_degm")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(&p, body).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#""epochs": 2, "k_prime": 5, "data": {"n_train": 120, "n_test": 40}"#;

#[test]
fn unknown_field_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"stream": ["bars"], "method": "elbo_gr", "epochz": 3}"#);
    let o = degm(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("epochz"));
}

#[test]
fn degm_methods_need_tau() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"stream": ["bars"], "method": "degm_elbo"}"#);
    let o = degm(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tau"));
}

#[test]
fn missing_data_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"stream": ["idx:/nonexistent/a.idx,/nonexistent/b.idx"], "method": "elbo_gr"}"#,
    );
    let out = dir.path().join("run");
    let o = degm(&["train", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("/nonexistent/a.idx"));
}

#[test]
fn diagnose_without_snapshots_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = degm(&["diagnose", "--run", dir.path().to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
    assert!(!stderr(&o).is_empty());
}

#[test]
fn replay_pipeline_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(r#"{{"stream": ["bars", "rings"], "method": "elbo_gr", "seed": 3, {SMALL}, "diagnostics": {{"enabled": true, "eval_k_prime": 10, "eval_size": 40}}}}"#),
    );
    let run = dir.path().join("gr");
    let o = degm(&["train", "--config", cfg.to_str().unwrap(), "--output-dir", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), METRICS_HEADER);
    let report: RunReport = serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.tasks, 2);
    assert_eq!(report.nll_matrix.len(), 2);

    let o = degm(&["diagnose", "--run", run.to_str().unwrap(), "--pool-size", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ledger = std::fs::read_to_string(run.join("diagnostics.csv")).unwrap();
    assert_eq!(ledger.lines().count(), 1 + 4);

    let plots = dir.path().join("plots");
    let export = || degm(&["export-plots", "--run", run.to_str().unwrap(), "--out", plots.to_str().unwrap()]);
    assert!(export().status.success());
    let fig = plots.join(format!("fig3b_{}.dat", report.run_id));
    let first = std::fs::read(&fig).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.split_whitespace().count() == 5));
    assert!(export().status.success());
    assert_eq!(std::fs::read(&fig).unwrap(), first);
}

#[test]
fn forced_expansion_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(r#"{{"stream": ["bars", "rings", "blobs"], "method": "degm2", "seed": 1, {SMALL}, "diagnostics": {{"eval_k_prime": 5}}}}"#),
    );
    let run = dir.path().join("d2");
    let o = degm(&["train", "--config", cfg.to_str().unwrap(), "--output-dir", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: RunReport = serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    let kinds = serde_json::to_value(&report.node_kinds).unwrap();
    assert_eq!(kinds.as_array().unwrap().len(), 3);
    assert!(kinds.as_array().unwrap().iter().all(|k| k.as_str() == Some("basic")), "{kinds}");

    let o = degm(&["eval", "--run", run.to_str().unwrap(), "--k-prime", "5", "--batch-size", "20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let eval: EvalReport = serde_json::from_str(&std::fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval.per_task.len(), 3);
    assert!(eval.per_task.iter().all(|t| t.batches == 2));
    assert!(eval.selection_accuracy.is_some());
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!(r#"{{"stream": ["bars"], "method": "elbo_gr", {SMALL}}}"#));
    let run = dir.path().join("r");
    let o = degm(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--epochs",
        "1",
        "--seeds",
        "4,5",
        "--eval-k-prime",
        "5",
        "--output-dir",
        run.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for s in [4, 5] {
        let m = std::fs::read_to_string(run.join(format!("seed-{s}")).join("metrics.csv")).unwrap();
        assert!(m.lines().skip(1).all(|l| l.contains(&format!(",{s},"))));
    }
    assert!(run.join("aggregate.json").exists());
}
