use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn sdid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdid")).args(args).output().expect("spawn sdid")
}

fn ok_json(args: &[&str]) -> Value {
    let out = sdid(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Data rows of a CSV with a leading comment line, as maps keyed by header.
fn csv_rows(text: &str) -> Vec<BTreeMap<String, String>> {
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# sdid "));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    lines
        .map(|l| header.iter().map(|h| h.to_string()).zip(l.split(',').map(String::from)).collect())
        .collect()
}

/// Prop-99 DID from cell means: treated minus control change in the mean.
fn prop99_did_oracle() -> f64 {
    let text = fs::read_to_string(data("prop99.csv")).unwrap();
    let mut sums = [[0.0f64; 2]; 2];
    let mut counts = [[0usize; 2]; 2];
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let tr = usize::from(f[0] == "California");
        let post = usize::from(f[1].parse::<i32>().unwrap() >= 1989);
        sums[tr][post] += f[2].parse::<f64>().unwrap();
        counts[tr][post] += 1;
    }
    let m = |a: usize, b: usize| sums[a][b] / counts[a][b] as f64;
    (m(1, 1) - m(1, 0)) - (m(0, 1) - m(0, 0))
}

#[test]
fn did_estimate_matches_cell_means() {
    let p = data("prop99.csv");
    let v = ok_json(&["estimate", p.to_str().unwrap(), "--method", "did"]);
    let tau = v["tau_hat"].as_f64().unwrap();
    assert!((tau - prop99_did_oracle()).abs() < 1e-9, "{tau}");
    assert_eq!(v["n_units"], 39);
    assert_eq!(v["n_treated"], 1);
    assert_eq!(v["n_periods"], 31);
    assert_eq!(v["t_post"], 12);
}

#[test]
fn estimate_reports_interval_and_echoes_seed() {
    let p = data("prop99.csv");
    let args = ["estimate", p.to_str().unwrap(), "--se-method", "placebo", "--reps", "50", "--seed", "11"];
    let v = ok_json(&args);
    let (tau, se) = (v["tau_hat"].as_f64().unwrap(), v["se"].as_f64().unwrap());
    assert!(se > 0.0);
    let lo = v["ci_lo"].as_f64().unwrap();
    let hi = v["ci_hi"].as_f64().unwrap();
    assert!((tau - lo - 1.959964 * se).abs() < 1e-4 && (hi - tau - 1.959964 * se).abs() < 1e-4);
    assert_eq!(v["meta"]["seed"], 11);
    assert_eq!(v["meta"]["tool"], "sdid");
    assert_eq!(v["replicates"], 50);
    // same seed, same bits
    assert_eq!(ok_json(&args), v);
}

#[test]
fn csv_estimate_has_comment_line() {
    let p = data("prop99.csv");
    let text = stdout(&sdid(&["estimate", p.to_str().unwrap(), "--method", "sc", "--format", "csv"]));
    let rows = csv_rows(&text);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["method"], "sc");
    assert!(rows[0]["se"].is_empty());
}

#[test]
fn weights_are_simplex_vectors() {
    let p = data("prop99.csv");
    let v = ok_json(&["weights", p.to_str().unwrap()]);
    let omega: Vec<f64> = v["omega"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    let lambda: Vec<f64> = v["lambda"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(omega.len(), 38);
    assert_eq!(lambda.len(), 19);
    assert_eq!(v["control_units"].as_array().unwrap().len(), 38);
    assert_eq!(v["pre_periods"][0], "1970");
    for w in [&omega, &lambda] {
        assert!(w.iter().all(|&x| x >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn influence_rows_cover_controls() {
    let p = data("prop99.csv");
    let rows = csv_rows(&stdout(&sdid(&["influence", p.to_str().unwrap()])));
    assert_eq!(rows.len(), 38);
    let total: f64 = rows.iter().map(|r| r["omega_i"].parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-6);
    assert!(rows.iter().all(|r| r["delta_i"].parse::<f64>().unwrap().is_finite()));
}

#[test]
fn plotdata_writes_trend_and_influence() {
    let dir = tempfile::tempdir().unwrap();
    let p = data("prop99.csv");
    stdout(&sdid(&["plotdata", p.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]));
    let trend = csv_rows(&fs::read_to_string(dir.path().join("trend.csv")).unwrap());
    assert_eq!(trend.len(), 31);
    assert_eq!(trend.iter().filter(|r| r["period"] == "post").count(), 12);
    assert!(trend.iter().filter(|r| r["period"] == "post").all(|r| r["lambda"].is_empty()));
    let weighted: Vec<i32> = trend
        .iter()
        .filter(|r| !r["lambda"].is_empty() && r["lambda"].parse::<f64>().unwrap() > 1e-6)
        .map(|r| r["time"].parse().unwrap())
        .collect();
    assert_eq!(weighted, vec![1986, 1987, 1988]);
    assert!(dir.path().join("influence.csv").exists());

    // DID weights are uniform
    stdout(&sdid(&["plotdata", p.to_str().unwrap(), "--method", "did", "--out-dir", dir.path().to_str().unwrap()]));
    let trend = csv_rows(&fs::read_to_string(dir.path().join("trend.csv")).unwrap());
    let lambda: f64 = trend[0]["lambda"].parse().unwrap();
    assert!((lambda - 1.0 / 19.0).abs() < 1e-9);
    let infl = csv_rows(&fs::read_to_string(dir.path().join("influence.csv")).unwrap());
    assert!(infl.iter().all(|r| (r["omega_i"].parse::<f64>().unwrap() - 1.0 / 38.0).abs() < 1e-9));
}

#[test]
fn malformed_input_reports_line_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "unit,time,outcome,treated\na,1,1.0,0\na,2,oops,0\nb,1,1.0,0\nb,2,2.0,1\n").unwrap();
    let out = sdid(&["estimate", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn panel_without_treated_units_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("none.csv");
    fs::write(&p, "unit,time,outcome,treated\na,1,1,0\na,2,2,0\nb,1,1,0\nb,2,3,0\n").unwrap();
    let out = sdid(&["estimate", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn input_is_not_modified() {
    let p = data("prop99.csv");
    let before = fs::read(&p).unwrap();
    stdout(&sdid(&["estimate", p.to_str().unwrap(), "--se-method", "placebo", "--reps", "10", "--method", "did"]));
    assert_eq!(fs::read(&p).unwrap(), before);
}

#[test]
fn calibrate_simulate_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    let out = sdid(&["calibrate", data("penn.csv").to_str().unwrap(), "--assignment", "dem", "-o", spec.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!String::from_utf8_lossy(&out.stderr).contains("separated"));
    let v: Value = serde_json::from_str(&fs::read_to_string(&spec).unwrap()).unwrap();
    let n = v["L"].as_array().unwrap().len();
    assert_eq!(v["pi"].as_array().unwrap().len(), n);
    assert!(v["calibration"]["f_norm"].as_f64().unwrap() > 0.0);

    let res = dir.path().join("res.json");
    let sim = [
        "simulate",
        spec.to_str().unwrap(),
        "--ntr",
        "10",
        "--tpost",
        "10",
        "--reps",
        "4",
        "--seed",
        "3",
        "--estimators",
        "sdid,did",
        "--name",
        "penn",
        "-o",
        res.to_str().unwrap(),
    ];
    stdout(&sdid(&sim));
    let first = fs::read(&res).unwrap();
    stdout(&sdid(&sim));
    assert_eq!(fs::read(&res).unwrap(), first);

    let rows = csv_rows(&stdout(&sdid(&["report", res.to_str().unwrap()])));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["setting"], "penn");
    assert_eq!(rows[0]["reps"], "4");
    assert_eq!(rows[0]["seed"], "3");
    assert!(rows[0]["rmse_sdid"].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn zero_reps_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    stdout(&sdid(&["calibrate", data("penn.csv").to_str().unwrap(), "-o", spec.to_str().unwrap()]));
    let out = sdid(&["simulate", spec.to_str().unwrap(), "--ntr", "5", "--tpost", "5", "--reps", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("study.json");
    let input = data("penn.csv");
    let cfg = serde_json::json!({
        "input": input,
        "assignment": "dem",
        "settings": [
            {"name": "dem", "ntr": 10, "tpost": 10, "reps": 3, "seed": 5, "estimators": ["sdid", "did"]},
            {"name": "random", "ntr": 10, "tpost": 10, "reps": 3, "seed": 6, "estimators": ["sdid", "did"],
             "random_assignment": true}
        ]
    });
    fs::write(&config, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        stdout(&sdid(&["pipeline", config.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]));
    }
    for f in ["spec.json", "dem.json", "random.json", "report.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest: Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"][1]["seed"], 6);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 4);
    let rows = csv_rows(&fs::read_to_string(a.join("report.csv")).unwrap());
    assert_eq!(rows.len(), 2);
}

#[test]
fn bad_thread_count_exits_2() {
    let out = Command::new(env!("CARGO_BIN_EXE_sdid"))
        .env("SDID_THREADS", "zero")
        .args(["weights", data("prop99.csv").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
