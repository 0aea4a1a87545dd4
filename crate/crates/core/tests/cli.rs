use std::path::Path;
use std::process::{Command, Output};

use cdghmm::io::{load_panel, DropoutMode};
use cdghmm::simulate::{sim1_spec, sim3_spec};
use serde_json::Value;

fn cdghmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdghmm")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("stderr is not JSON: {}", String::from_utf8_lossy(&out.stderr)))
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn simulate(dir: &Path, spec: &cdghmm::simulate::SimSpec) -> std::path::PathBuf {
    let spec_path = dir.join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string(spec).unwrap()).unwrap();
    let data = dir.join("data.csv");
    let out = cdghmm(&["simulate", "--spec", p(&spec_path), "--out", p(&data), "--truth", p(&dir.join("truth.json"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn help_exits_zero() {
    assert_eq!(cdghmm(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_arguments_exit_one_with_json() {
    let out = cdghmm(&["fit", "--model", "XYZ"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["exit_code"], 1);
}

#[test]
fn unreadable_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "id,time,x\n1,1,0.5\n1,1,0.7\n").unwrap();
    let out = cdghmm(&["fit", "--data", p(&bad), "--model", "EEI", "--states", "2", "--out", p(&dir.path().join("f.json"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert!(err["message"].as_str().unwrap().contains("duplicate"));
}

#[test]
fn simulate_fit_decode_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = sim1_spec("G1", 40).unwrap();
    spec.seed = 9;
    let data = simulate(dir.path(), &spec);
    let truth = read_json(&dir.path().join("truth.json"));
    assert_eq!(truth["states"].as_array().unwrap().len(), 40);

    let fit_path = dir.path().join("fit.json");
    let out = cdghmm(&["fit", "--data", p(&data), "--model", "VVA", "--states", "2", "--starts", "3", "--out", p(&fit_path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fit = read_json(&fit_path);
    assert_eq!(fit["format"], "cdghmm-fit");
    assert_eq!(fit["structure"], "VVA");
    assert!(fit["bic"].as_f64().unwrap() < 2.0 * fit["loglik"].as_f64().unwrap());

    let decoded = dir.path().join("decoded.csv");
    let out = cdghmm(&["decode", "--data", p(&data), "--fit", p(&fit_path), "--out", p(&decoded)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_path(&decoded).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["id", "time", "state", "prob_1", "prob_2"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 40 * 5);
    for r in &rows {
        let state: usize = r[2].parse().unwrap();
        assert!((1..=2).contains(&state));
        let probs: Vec<f64> = (3..5).map(|c| r[c].parse().unwrap()).collect();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(probs[state - 1] >= probs[2 - state]);
    }
}

#[test]
fn simulated_csv_reloads_with_dropout() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = sim3_spec(2, 0.3, 30).unwrap();
    spec.seed = 4;
    let data = simulate(dir.path(), &spec);
    let auto = load_panel(&data, DropoutMode::Auto).unwrap();
    let column = load_panel(&data, DropoutMode::Column).unwrap();
    assert_eq!(auto.dropout, column.dropout);
    assert!(auto.has_dropout());
    assert!(!load_panel(&data, DropoutMode::Off).unwrap().has_dropout());
}

#[test]
fn select_ranks_all_members() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = sim1_spec("G1", 30).unwrap();
    spec.seed = 2;
    let data = simulate(dir.path(), &spec);
    let report_path = dir.path().join("select.json");
    let out = cdghmm(&["select", "--data", p(&data), "--states", "2", "--starts", "2", "--criterion", "icl", "--out", p(&report_path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&report_path);
    let models = report["models"].as_array().unwrap();
    assert_eq!(models.len(), 8);
    let icl: Vec<f64> = models.iter().map(|m| m["icl"].as_f64().unwrap()).collect();
    assert!(icl.windows(2).all(|w| w[0] >= w[1]));
    for m in models {
        assert!(m["icl"].as_f64().unwrap() <= m["bic"].as_f64().unwrap() + 1e-9);
    }
    assert_eq!(report["best"], models[0]["model"]);
}

#[test]
fn study_writes_one_row_per_fit() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("study.csv");
    let out = cdghmm(&["study", "--name", "sim1", "--replicates", "5", "--starts", "1", "--seed", "3", "--out", p(&out_path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_path(&out_path).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(&header[..6], ["study", "replicate", "model", "mechanism", "gamma_id", "n"]);
    assert_eq!(rdr.records().count(), 5 * 48);
}

#[test]
fn unknown_study_is_a_usage_error() {
    let out = cdghmm(&["study", "--name", "sim9", "--out", "/tmp/never.csv"]);
    assert_eq!(out.status.code(), Some(1));
}
