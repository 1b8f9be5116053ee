use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use tempfile::TempDir;

fn manf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_manf")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, dims: usize, steps: usize) -> PathBuf {
    let out = dir.join(name);
    let (d, t) = (dims.to_string(), steps.to_string());
    let o = manf(&["synth", "--kind", "sinusoid-mix", "--dims", &d, "--steps", &t, "--seed", "7", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn tiny_config(data: &Path, output: &Path, epochs: usize) -> Value {
    json!({
        "version": 1,
        "data": data,
        "output": output,
        "model": { "dims": 4, "horizon": 8, "hidden_dim": 8, "heads": 2, "flow_hidden": 16, "seed": 1 },
        "train": { "epochs": epochs, "batches_per_epoch": 5, "batch_size": 8, "holdout_windows": 3, "seed": 2 },
        "eval": { "windows": 3, "samples": 20 }
    })
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path
}

/// Tiny trained run: (tempdir, data csv, run output dir).
fn trained(epochs: usize) -> (TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data.csv", 4, 400);
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "run.json", &tiny_config(&data, &out, epochs));
    let o = manf(&["train", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (dir, data, out)
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn synth_writes_expected_shape_and_property_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.csv");
    let o = manf(&["synth", "--kind", "sinusoid-mix", "--dims", "8", "--steps", "4096", "--seed", "7", "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    let rows = read_csv(&out);
    assert_eq!(rows.len(), 4097);
    assert!(rows.iter().all(|r| r.len() == 9));
    let line = String::from_utf8(o.stdout).unwrap();
    assert!(line.contains("dimension 8") && line.contains("hourly") && line.contains("4096"), "{line}");
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a.csv", 3, 200);
    let b = synth(dir.path(), "b.csv", 3, 200);
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn synth_usage_and_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.csv");
    assert_eq!(code(&manf(&["synth", "--dims", "0", "--steps", "10", "--out", p(&out)])), 64);
    assert_eq!(code(&manf(&["synth", "--kind", "nope", "--dims", "2", "--steps", "10", "--out", p(&out)])), 64);
    let blocked = dir.path().join("missing/dir/x.csv");
    assert_eq!(code(&manf(&["synth", "--dims", "2", "--steps", "10", "--out", p(&blocked)])), 2);
    assert_eq!(code(&manf(&["--help"])), 0);
}

#[test]
fn tiny_training_run_writes_artifacts_quickly() {
    let start = Instant::now();
    let (_dir, _, out) = trained(2);
    assert!(start.elapsed() < Duration::from_secs(60));
    let hist = read_csv(&out.join("history.csv"));
    assert_eq!(hist[0], ["epoch", "loss", "crps_sum", "mse"]);
    assert_eq!(hist.len(), 3);
    assert!(hist[1..].iter().all(|r| r[1].parse::<f64>().unwrap().is_finite()));
    assert!(out.join("checkpoint").join("manifest.json").is_file());
    let echo: Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["version"], 1);
    assert_eq!(echo["model"]["hidden_dim"], 8);
    // defaults filled in
    assert_eq!(echo["model"]["enc_layers"], 3);
}

#[test]
fn resumed_training_reproduces_uninterrupted_run() {
    let (_a, _, full) = trained(3);
    let (dir, data, out) = trained(2);
    let cfg = write_config(dir.path(), "more.json", &tiny_config(&data, &out, 3));
    let o = manf(&["train", p(&cfg), "--resume"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (x, y) = (read_csv(&full.join("history.csv")), read_csv(&out.join("history.csv")));
    assert_eq!(x.len(), 4);
    let (lx, ly): (f64, f64) = (x[3][1].parse().unwrap(), y[3][1].parse().unwrap());
    assert!((lx - ly).abs() <= 1e-9, "{lx} {ly}");
}

#[test]
fn config_errors_are_usage_errors_with_field_paths() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.csv", 4, 300);
    let mut cfg = tiny_config(&data, &dir.path().join("r"), 1);
    cfg["model"]["hidden_dimm"] = json!(8);
    let o = manf(&["train", p(&write_config(dir.path(), "a.json", &cfg))]);
    assert_eq!(code(&o), 64);
    assert!(stderr(&o).contains("model.hidden_dimm"), "{}", stderr(&o));

    let mut cfg = tiny_config(&data, &dir.path().join("r"), 1);
    cfg["train"]["lr"] = json!("fast");
    let o = manf(&["train", p(&write_config(dir.path(), "b.json", &cfg))]);
    assert_eq!(code(&o), 64);
    assert!(stderr(&o).contains("train.lr"), "{}", stderr(&o));

    let mut cfg = tiny_config(&data, &dir.path().join("r"), 1);
    cfg["version"] = json!(2);
    assert_eq!(code(&manf(&["train", p(&write_config(dir.path(), "c.json", &cfg))])), 64);
}

#[test]
fn missing_inputs_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&dir.path().join("nope.csv"), &dir.path().join("r"), 1);
    assert_eq!(code(&manf(&["train", p(&write_config(dir.path(), "a.json", &cfg))])), 2);
    assert_eq!(code(&manf(&["train", p(&dir.path().join("absent.json"))])), 2);
}

#[test]
fn dims_mismatch_is_a_data_error() {
    let (dir, _, out) = trained(1);
    let other = synth(dir.path(), "wide.csv", 5, 400);
    let ck = out.join("checkpoint");
    assert_eq!(code(&manf(&["evaluate", "--checkpoint", p(&ck), "--data", p(&other)])), 65);
    let cfg = tiny_config(&other, &dir.path().join("r2"), 1);
    assert_eq!(code(&manf(&["train", p(&write_config(dir.path(), "w.json", &cfg))])), 65);
}

#[test]
fn evaluate_reports_the_score_schema() {
    let (dir, data, out) = trained(1);
    let ck = out.join("checkpoint");
    let base = ["evaluate", "--checkpoint", p(&ck), "--data", p(&data), "--windows", "3", "--samples", "20"];
    let plain = manf(&base);
    assert_eq!(code(&plain), 0, "{}", stderr(&plain));
    let v: Value = serde_json::from_slice(&plain.stdout).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["crps_sum", "mse", "n_samples", "per_series_crps", "windows"]);

    let zero = manf(&[&base[..], &["--missing", "0"]].concat());
    assert_eq!(zero.stdout, plain.stdout);

    let report = dir.path().join("c2.json");
    let c2 = manf(&[&base[..], &["--missing", "0.3", "--out", p(&report)]].concat());
    assert_eq!(code(&c2), 0);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert!(v["crps_sum"].as_f64().unwrap().is_finite() && v["mse"].as_f64().unwrap().is_finite());

    assert_eq!(code(&manf(&[&base[..], &["--missing", "1.5"]].concat())), 64);
}

#[test]
fn forecast_quantiles_are_ordered_and_charts_are_well_formed() {
    let (dir, data, out) = trained(1);
    let ck = out.join("checkpoint");
    let fc = dir.path().join("fc");
    let o = manf(&["forecast", "--checkpoint", p(&ck), "--data", p(&data), "--samples", "50", "--out", p(&fc), "--plot", "--series", "0,2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = read_csv(&fc.join("quantiles.csv"));
    assert_eq!(rows[0], ["t", "series", "q05", "q25", "q50", "q75", "q95", "actual"]);
    assert_eq!(rows.len(), 1 + 8 * 4);
    assert_eq!(rows[1][0], "392");
    for r in &rows[1..] {
        let q: Vec<f64> = r[2..7].iter().map(|v| v.parse().unwrap()).collect();
        assert!(q.windows(2).all(|w| w[0] <= w[1]), "{r:?}");
        assert!(r[7].parse::<f64>().is_ok());
    }
    assert!(!fc.join("series_1.svg").exists());
    for s in [0, 2] {
        let text = std::fs::read_to_string(fc.join(format!("series_{s}.svg"))).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        let points = |id: &str| {
            let n = doc.descendants().find(|n| n.attribute("id") == Some(id)).unwrap();
            n.attribute("points").unwrap().split_whitespace().count()
        };
        assert_eq!(points("median"), 8);
        assert_eq!(points("actual"), 8);
        assert_eq!(points("band50"), 16);
        assert_eq!(points("band90"), 16);
    }
}

#[test]
fn single_sample_forecast_collapses_quantiles() {
    let (dir, data, out) = trained(1);
    let fc = dir.path().join("one");
    let o = manf(&["forecast", "--checkpoint", p(&out.join("checkpoint")), "--data", p(&data), "--samples", "1", "--out", p(&fc)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for r in &read_csv(&fc.join("quantiles.csv"))[1..] {
        assert!(r[2..7].iter().all(|v| v == &r[2]), "{r:?}");
    }
    assert_eq!(code(&manf(&["forecast", "--checkpoint", p(&out.join("checkpoint")), "--data", p(&data), "--samples", "0", "--out", p(&fc)])), 64);
}

#[test]
fn single_value_sweep_matches_train_then_evaluate() {
    let (dir, data, out) = trained(1);
    let cfg = write_config(dir.path(), "run.json", &tiny_config(&data, &out, 1));
    let csv = dir.path().join("sweep.csv");
    let o = manf(&["sweep", p(&cfg), "--param", "lr", "--values", "0.001", "--out", p(&csv)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = read_csv(&csv);
    assert_eq!(rows[0], ["param", "value", "crps_sum", "mse"]);
    assert_eq!(rows[1][..2], ["lr", "0.001"]);

    let ev = manf(&["evaluate", "--checkpoint", p(&out.join("checkpoint")), "--data", p(&data), "--windows", "3", "--samples", "20"]);
    let v: Value = serde_json::from_slice(&ev.stdout).unwrap();
    assert_eq!(rows[1][2].parse::<f64>().unwrap(), v["crps_sum"].as_f64().unwrap());
    assert_eq!(rows[1][3].parse::<f64>().unwrap(), v["mse"].as_f64().unwrap());
}

#[test]
fn sweep_rows_follow_values_and_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.csv", 4, 400);
    let mut cfg = tiny_config(&data, &dir.path().join("r"), 1);
    cfg["train"]["batches_per_epoch"] = json!(2);
    let cfg = write_config(dir.path(), "run.json", &cfg);
    let run = |name: &str| {
        let csv = dir.path().join(name);
        let o = manf(&["sweep", p(&cfg), "--param", "layers", "--values", "1,2", "--out", p(&csv)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read(csv).unwrap()
    };
    let a = run("a.csv");
    assert_eq!(a, run("b.csv"));
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 3);
    let bad = manf(&["sweep", p(&cfg), "--param", "depth", "--values", "1", "--out", p(&dir.path().join("c.csv"))]);
    assert_eq!(code(&bad), 64);
    let bad = manf(&["sweep", p(&cfg), "--param", "hidden_dim", "--values", "7", "--out", p(&dir.path().join("c.csv"))]);
    assert_eq!(code(&bad), 64);
}
