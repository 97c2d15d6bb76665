use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vleto(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vleto")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, data: &Path, extra: &str) -> String {
    let cfg = format!(
        r#"{{
  "dataset": {{"csv": {{"path": {data:?}, "label_column": "label"}}}},
  "k_parties": 2,
  "mode": "CIL",
  "n_tasks": 2,
  "epochs": 2,
  "lr": 0.05,
  "output_dir": {out:?}{extra}
}}"#,
        out = dir.join("out").display().to_string(),
        data = data.display().to_string(),
    );
    let path = dir.join("config.json");
    fs::write(&path, cfg).unwrap();
    path.display().to_string()
}

#[test]
fn gen_data_then_run_then_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("blobs.csv");
    let stdout = ok(&vleto(&[
        "gen-data", "--out", data.to_str().unwrap(), "--samples", "200", "--features", "6", "--classes", "4",
    ]));
    assert!(stdout.contains("200 samples"));
    let text = fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().next().unwrap(), "f0,f1,f2,f3,f4,f5,label");
    assert_eq!(text.lines().count(), 201);

    let config = write_config(tmp.path(), &data, "");
    let stdout = ok(&vleto(&["run", "--config", &config, "--export-prototypes", "--dump-fisher"]));
    assert!(stdout.contains("AVG"));
    let out = tmp.path().join("out");
    assert!(out.join("metrics.csv").exists());
    assert!(out.join("prototypes.json").exists());
    assert!(out.join("fisher_0_0.json").exists() && out.join("fisher_1_1.json").exists());
    assert!(!out.join("trace.json").exists());

    let other = tmp.path().join("seed7");
    ok(&vleto(&["run", "--config", &config, "--seed", "7", "--out-dir", other.to_str().unwrap()]));
    let saved = fs::read_to_string(other.join("config.json")).unwrap();
    assert!(saved.contains("\"seed\": 7"));

    let a = out.join("metrics.csv");
    let b = other.join("metrics.csv");
    let report = tmp.path().join("cmp.csv");
    let stdout = ok(&vleto(&[
        "compare", a.to_str().unwrap(), b.to_str().unwrap(), "--out", report.to_str().unwrap(),
    ]));
    assert!(stdout.contains("out") && stdout.contains("seed7") && stdout.contains("AVG"));
    assert!(fs::read_to_string(report).unwrap().starts_with("run,task_id,aggregate_accuracy,delta"));
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = vleto(&["run", "--config", tmp.path().join("nope.json").to_str().unwrap()]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.json"));

    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"mode": "CIL", "lr": -1}"#).unwrap();
    let bad = vleto(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("lr"));

    let one = vleto(&["compare", "only.csv"]);
    assert!(!one.status.success());
}
