use std::path::Path;
use std::process::Command;

use dcl_core::cl::Method;
use dcl_core::harness::{self, build_lab, pretrain_base_model, run_pair_with, ExperimentConfig, RunLog, NONE_METHOD};
use dcl_core::metrics::ResultsTable;
use dcl_core::tasks::{decode_dataset, DatasetSidecar};
use dcl_core::vocab::Vocab;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.n_train = 128;
    cfg.data.n_val = 6;
    cfg.data.n_test = 6;
    cfg.model.d_model = 16;
    cfg.model.d_ff = 32;
    cfg.pretrain.epochs = 2;
    cfg.adapt.trainer.epochs = 1;
    cfg
}

#[test]
fn config_json_round_trips_and_partial_files_fill_defaults() {
    let cfg = tiny();
    let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
    assert_eq!(back, cfg);
    let partial = ExperimentConfig::from_json(r#"{"seed": 3, "data": {"n_train": 7}}"#).unwrap();
    assert_eq!(partial.seed, 3);
    assert_eq!(partial.data.n_train, 7);
    assert_eq!(partial.data.n_val, ExperimentConfig::default().data.n_val);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = tiny();
    cfg.adapt.new_languages = vec!["L1".into()];
    assert!(cfg.validate().is_err());
    let mut cfg = tiny();
    cfg.eval.modes.clear();
    assert!(cfg.validate().is_err());
    let mut cfg = tiny();
    cfg.pretrain.languages = vec!["XX".into()];
    assert!(cfg.validate().is_err());
}

#[test]
fn none_row_does_not_depend_on_the_method_set_and_snapshots_re_execute() {
    let cfg = tiny();
    let lab = build_lab(&cfg).unwrap();
    let base = pretrain_base_model(&cfg, &lab).unwrap();
    let started = std::time::Instant::now();
    let mut a_cfg = cfg.clone();
    a_cfg.adapt.methods = vec![Method::Ft];
    let mut b_cfg = cfg.clone();
    b_cfg.adapt.methods = vec![Method::Er, Method::AgemM];
    let a = run_pair_with(&a_cfg, &lab, &base, started).unwrap();
    let b = run_pair_with(&b_cfg, &lab, &base, started).unwrap();
    let none = |log: &RunLog| -> Vec<_> { log.results.iter().filter(|r| r.method == NONE_METHOD).cloned().collect() };
    assert!(!none(&a).is_empty());
    assert_eq!(none(&a), none(&b));

    // the stored config snapshot reproduces the same table
    let json = serde_json::to_string(&b).unwrap();
    let stored: RunLog = serde_json::from_str(&json).unwrap();
    let again = harness::run_pair_setting(&stored.config).unwrap();
    let direct = harness::run_pair_setting(&b_cfg).unwrap();
    assert_eq!(again.table(), direct.table());
}

fn dcl(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dcl")).args(args).output().unwrap()
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, cfg.to_json().unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn cli_generate_data_writes_regenerable_containers() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny());
    let out = tmp.path().join("data");
    let o = dcl(&["generate-data", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let vocab = Vocab::from_text(&std::fs::read_to_string(out.join("vocab.txt")).unwrap()).unwrap();
    assert!(vocab.lid_id("L1").is_some());
    for lang in ["L1", "N1"] {
        let bytes = std::fs::read(out.join(format!("{lang}.bin"))).unwrap();
        let ds = decode_dataset(&bytes).unwrap();
        assert_eq!(ds.train.len(), 128);
        let sidecar: DatasetSidecar =
            serde_json::from_str(&std::fs::read_to_string(out.join(format!("{lang}.json"))).unwrap()).unwrap();
        assert_eq!(sidecar.regenerate().unwrap(), ds);
    }
}

#[test]
fn cli_run_pair_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny());
    let out = tmp.path().join("run");
    let out_s = out.to_str().unwrap();
    let o = dcl(&["run-pair", "--config", &cfg, "--out", out_s, "--method", "FT,AGEM_M", "--modes", "aware"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["results.csv", "summary.csv", "history.jsonl", "hypotheses.jsonl", "runlog.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let table = ResultsTable::from_csv(&std::fs::read_to_string(out.join("results.csv")).unwrap()).unwrap();
    assert_eq!(table.methods(), [NONE_METHOD, "FT", "AGEM_M"]);
    let report = dcl(&["report", "--out", out_s]);
    assert!(report.status.success());
    let text = String::from_utf8(report.stdout).unwrap();
    assert!(text.contains("| AGEM_M | aware |"), "{text}");
}

#[test]
fn cli_reports_bad_input() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"adapt": {"new_languages": ["L1"]}}"#).unwrap();
    let o = dcl(&["run-pair", "--config", bad.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(!dcl(&["run-pair", "--method", "NOPE"]).status.success());
    assert!(!dcl(&["report", "--out", tmp.path().join("missing").to_str().unwrap()]).status.success());
}
