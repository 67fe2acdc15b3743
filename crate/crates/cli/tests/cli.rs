//! Runs the built binary end to end on a small generated corridor.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcn-rwz"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gcn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &str = r#"
[data]
speeds = "speeds.csv"
distances = "distances.csv"
workzones = "workzones.csv"
cache = "cache/features.bin"

[features]
history = 4
horizon = 3

[model]
blocks = 1
heads = 1
head_dim = 4
channels = 4
rnn_hidden = 4
time_dim = 2
k_neighbors = 2

[training]
epochs = 2
batch_size = 32

[evaluation]
horizon = 3

[output]
dir = "run"
"#;

fn corridor(dir: &Path) -> String {
    ok(&["synth", "--out", dir.to_str().unwrap(), "--segments", "5", "--days", "3", "--seed", "4"]);
    let config = dir.join("small.toml");
    std::fs::write(&config, SMALL).unwrap();
    config.to_str().unwrap().to_string()
}

#[test]
fn pipeline_from_ingest_to_forecast() {
    let tmp = tempfile::tempdir().unwrap();
    let config = corridor(tmp.path());
    let cfg = config.as_str();

    let summary: Value = serde_json::from_str(&ok(&["ingest", "--config", cfg])).unwrap();
    assert_eq!(summary["segments"], 5);
    assert!(tmp.path().join("cache/features.bin").exists());

    ok(&["train", "--config", cfg, "--seed", "1"]);
    let history = std::fs::read_to_string(tmp.path().join("run/history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);
    for line in history.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        assert!(rec["train_loss"].as_f64().unwrap().is_finite());
    }

    let report_path = tmp.path().join("report.json");
    ok(&[
        "evaluate",
        "--config",
        cfg,
        "--split",
        "test",
        "--horizon",
        "3",
        "--condition",
        "normal",
        "--out",
        report_path.to_str().unwrap(),
    ]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report["metrics"]["mae"].as_f64().unwrap() >= 0.0);

    let events = tmp.path().join("events.json");
    std::fs::write(
        &events,
        r#"[{"segment_id": "seg002", "start": "2019-01-08T05:00:00", "end": "2019-01-08T08:00:00"}]"#,
    )
    .unwrap();
    let csv = ok(&[
        "forecast",
        "--config",
        cfg,
        "--anchor",
        "2019-01-08T06:00:00",
        "--horizon",
        "3",
        "--events",
        events.to_str().unwrap(),
    ]);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[0].starts_with("segment_id,2019-01-08T06:00:00"));
    for row in &rows[1..] {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), 4);
        assert!(cells[1..].iter().all(|c| c.parse::<f64>().unwrap().is_finite()));
    }
}

#[test]
fn exit_codes_follow_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let config = corridor(tmp.path());

    let missing = gcn(&["ingest", "--config", tmp.path().join("nope.toml").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));

    let bad_key = tmp.path().join("bad.toml");
    std::fs::write(&bad_key, SMALL.replace("epochs = 2", "epochs = 2\nlearning_rat = 1.0")).unwrap();
    assert_eq!(gcn(&["train", "--config", bad_key.to_str().unwrap()]).status.code(), Some(2));

    let horizon = gcn(&["evaluate", "--config", &config, "--horizon", "5"]);
    assert_eq!(horizon.status.code(), Some(2));

    let speeds = tmp.path().join("speeds.csv");
    let mut text = std::fs::read_to_string(&speeds).unwrap();
    text.push_str("not-a-time,1,2,3,4,5\n");
    std::fs::write(&speeds, text).unwrap();
    assert_eq!(gcn(&["ingest", "--config", &config]).status.code(), Some(3));
}
