use std::fs;
use std::process::{Command, Output};

use serde_json::Value;

fn dlsem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlsem"))
        .args(args)
        .env("DLSEM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("valid JSON")
}

fn param<'a>(report: &'a Value, name: &str) -> &'a Value {
    report["parameters"].as_array().unwrap().iter().find(|p| p["name"] == name).unwrap()
}

#[test]
fn fit_bundled_data_with_expected_information() {
    let out = dlsem(&["fit", "--method", "ml", "--se", "expected-model"]);
    let r = json(&out);
    let l11 = param(&r, "visual=~x1");
    assert!((l11["estimate"].as_f64().unwrap() - 0.817).abs() < 0.005);
    assert!((l11["se"].as_f64().unwrap() - 0.099).abs() < 0.005);
    assert_eq!(r["provenance"]["version"], env!("CARGO_PKG_VERSION"));
    assert!(r["provenance"].get("seed").is_some());
    assert_eq!(r["provenance"]["n"], 145);
    assert_eq!(r["statistics"]["rank_ug"], 23);
    let names: Vec<&str> = r["parameters"].as_array().unwrap().iter().map(|p| p["name"].as_str().unwrap()).collect();
    assert_eq!(names[0], "visual=~x1");
    assert_eq!(names.len(), 22);
}

#[test]
fn dls_at_one_matches_gls_m() {
    let a = json(&dlsem(&["fit", "--method", "dls-m", "--a", "1.0", "--se", "sandwich"]));
    let b = json(&dlsem(&["fit", "--method", "gls-m", "--se", "sandwich"]));
    let close = |x: &Value, y: &Value| (x.as_f64().unwrap() - y.as_f64().unwrap()).abs() < 1e-10;
    for (pa, pb) in a["parameters"].as_array().unwrap().iter().zip(b["parameters"].as_array().unwrap()) {
        assert_eq!(pa["name"], pb["name"]);
        assert!(close(&pa["estimate"], &pb["estimate"]) && close(&pa["se"], &pb["se"]), "{pa} vs {pb}");
    }
    for key in ["t", "t_sb", "t_mva", "t_jy", "p_jy"] {
        assert!(close(&a["statistics"][key], &b["statistics"][key]), "{key}");
    }
}

#[test]
fn out_of_range_a_is_invalid_input() {
    let out = dlsem(&["fit", "--method", "dls-m", "--a", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("outside"));
}

#[test]
fn unknown_method_and_bad_se_choice_are_invalid_input() {
    assert_eq!(dlsem(&["fit", "--method", "nope"]).status.code(), Some(2));
    assert_eq!(dlsem(&["fit", "--method", "gls-s", "--se", "observed-model"]).status.code(), Some(2));
}

#[test]
fn csv_output_has_parameter_rows() {
    let out = dlsem(&["fit", "--method", "rgls-i", "--a", "0.36", "--out", "csv"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("name,estimate,se,z"));
    assert_eq!(lines.count(), 22);
}

#[test]
fn non_convergence_exit_code() {
    // Two observations of three variables: the ML discrepancy is undefined,
    // while WLS has a singular fourth-moment matrix and cannot converge.
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("tiny.csv");
    fs::write(&data, "a,b,c\n1,2,3\n2,1,5\n4,4,1\n").unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"variables":["a","b","c"],"factors":{"f":["a","b","c"]}}"#).unwrap();
    let out = dlsem(&["fit", "--data", data.to_str().unwrap(), "--spec", spec.to_str().unwrap(), "--method", "wls"]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["convergence"]["converged"], false);
}

#[test]
fn missing_file_is_invalid_input() {
    let out = dlsem(&["fit", "--data", "/nonexistent/data.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn describe_bundled_and_constant_column() {
    let r = json(&dlsem(&["describe"]));
    assert_eq!(r["n"], 145);
    assert_eq!(r["p"], 9);
    assert!(r["skewness"].as_f64().unwrap() > 0.0);

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("const.csv");
    fs::write(&data, "a,b\n1,5\n2,5\n3,5\n4,5\n").unwrap();
    let out = dlsem(&["describe", "--data", data.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("singular"));
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(r["skewness"].is_null());
}

#[test]
fn tune_is_deterministic_and_warns_on_single_sample() {
    let args = ["tune", "--method", "rgls-i", "--grid", "0.2,0.4,0.6", "--bootstrap", "4", "--seed", "3"];
    let a = dlsem(&args);
    let b = dlsem(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let r: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(r["curve"].as_array().unwrap().len(), 3);
    assert_eq!(r["seed"], 3);

    let dir = tempfile::tempdir().unwrap();
    let curve = dir.path().join("curve.csv");
    let out = dlsem(&["tune", "--grid", "0.5,1", "--bootstrap", "1", "--curve", curve.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("degenerate"));
    assert!(fs::read_to_string(curve).unwrap().starts_with("a,rmse,converged"));
}

#[test]
fn tune_rejects_bad_grid() {
    assert_eq!(dlsem(&["tune", "--grid", "0:2:0.5", "--bootstrap", "2"]).status.code(), Some(2));
    assert_eq!(dlsem(&["tune", "--grid", "x", "--bootstrap", "2"]).status.code(), Some(2));
}

const SMALL_STUDY: &str = r#"{"p":4,"m":1,"n_list":[120],"conditions":["normal"],
    "methods":[{"method":"dls-m","grid":[0.5,1.0]},{"method":"ml-em"}],"replications":6,"seed":11}"#;

#[test]
fn simulate_writes_all_outputs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("study.json");
    fs::write(&cfg, SMALL_STUDY).unwrap();
    let out1 = dir.path().join("run1");
    let out2 = dir.path().join("run2");
    for out in [&out1, &out2] {
        let o = dlsem(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["report.json", "cells.csv", "selections.csv", "plot_rmse_by_a.csv", "plot_rmse_by_n.csv", "plot_rejection_by_n.csv"] {
        assert!(out1.join(f).exists(), "{f} missing");
    }
    assert_eq!(fs::read(out1.join("report.json")).unwrap(), fs::read(out2.join("report.json")).unwrap());
    let r: Value = serde_json::from_slice(&fs::read(out1.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["seed"], 11);
    assert!(r["version"].is_string());
}

#[test]
fn simulate_unknown_condition_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("study.json");
    fs::write(&cfg, SMALL_STUDY.replace("\"normal\"", "\"normal\",\"wobbly\"")).unwrap();
    let o = dlsem(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("conditions[1]"));
}

#[test]
fn optimizer_flags_reach_the_fitter() {
    let out = dlsem(&["fit", "--method", "dls-m", "--a", "0.75", "--max-iterations", "1"]);
    assert_eq!(out.status.code(), Some(3));
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["convergence"]["iterations"], 1);
    assert_eq!(dlsem(&["fit", "--param-tol", "0"]).status.code(), Some(2));
}
