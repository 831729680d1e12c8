use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nexica(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nexica"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = nexica(args, cwd);
    assert!(
        out.status.success(),
        "nexica {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_of(args: &[&str], cwd: &Path) -> String {
    let out = nexica(args, cwd);
    assert!(!out.status.success(), "nexica {args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

const SPEC: &str = r#"{"n_stations": 8, "n_slots": 6048, "p_s": 0.05, "seed": 5,
 "random_edges": {"count": 5, "p_c_min": 0.4, "p_c_max": 0.9}, "stations_per_road": 4}"#;

#[test]
fn synth_run_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("spec.json"), SPEC).unwrap();
    ok(&["synth", "--spec", "spec.json", "--out", "data"], d);
    for f in ["speeds.csv", "meta.csv", "drive_times.csv", "events.csv", "truth.csv"] {
        assert!(d.join("data").join(f).exists(), "{f}");
    }
    let args = [
        "run", "--speeds", "data/speeds.csv", "--meta", "data/meta.csv", "--drive-times", "data/drive_times.csv",
        "--truth", "data/truth.csv", "--ratio", "1:3", "--n-trees", "30", "--out", "run",
    ];
    ok(&args, d);
    let metrics = fs::read(d.join("run/metrics.json")).unwrap();
    let json: serde_json::Value = serde_json::from_slice(&metrics).unwrap();
    assert_eq!(json["n_stations"], 8);
    assert!(json["evaluation"]["forest_auc"].as_f64().unwrap() > 0.5);

    // the written config reproduces the run
    ok(&["run", "--config", "run/config.toml", "--out", "rerun"], d);
    assert_eq!(metrics, fs::read(d.join("rerun/metrics.json")).unwrap());

    let text = ok(&["report", "run"], d);
    assert!(text.contains("forest AUC"), "{text}");
}

#[test]
fn stage_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("spec.json"), SPEC).unwrap();
    ok(&["synth", "--spec", "spec.json", "--out", "data"], d);
    ok(&["events", "--speeds", "data/speeds.csv", "--meta", "data/meta.csv", "--out", "events.csv"], d);
    ok(&["pairs", "--events", "events.csv", "--out", "pairs.csv"], d);
    let header = fs::read_to_string(d.join("pairs.csv")).unwrap();
    assert!(header.starts_with("cause,effect,lag,tau,window,a00,a01,a10,a11,p_s,p_c"));
    assert_eq!(header.lines().count(), 1 + 8 * 7 * 8);
    ok(
        &["ground-truth", "--drive-times", "data/drive_times.csv", "--truth", "data/truth.csv", "--ratio", "1:3", "--out", "labels.csv"],
        d,
    );
    ok(&["train", "--pairs", "pairs.csv", "--labels", "labels.csv", "--n-trees", "20", "--out", "model.json"], d);
    let scored = ok(&["evaluate", "--pairs", "pairs.csv", "--labels", "labels.csv", "--model", "model.json"], d);
    let v: serde_json::Value = serde_json::from_str(&scored).unwrap();
    assert!(v["model_fingerprint"].as_str().unwrap().len() == 64);
    ok(&["evaluate", "--pairs", "pairs.csv", "--labels", "labels.csv", "--n-trees", "20", "--out", "eval"], d);
    assert!(d.join("eval").read_dir().unwrap().count() > 0);
    let ablation = ok(&["ablate", "--pairs", "pairs.csv", "--labels", "labels.csv", "--n-trees", "10"], d);
    assert_eq!(ablation.lines().count(), 16);
}

#[test]
fn mle_on_a_single_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["mle", "--counts", "8000,500,300,200"], tmp.path());
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["case"], "interior");
    let pc = v["p_c"].as_f64().unwrap();
    assert!(pc > 0.0 && pc < 1.0);
    let err = stderr_of(&["mle", "--counts", "1,2"], tmp.path());
    assert!(err.contains("[config]"), "{err}");
}

#[test]
fn failures_are_tagged_with_their_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let err = stderr_of(&["run", "--speeds", "missing.csv"], d);
    assert!(err.starts_with("nexica: [config]"), "{err}");
    assert_eq!(err.matches("does not exist").count(), 1, "{err}");

    fs::write(d.join("bad.csv"), "station_id,timestamp_iso8601,mean_speed,imputed\nA,2024-01-01T00:00:00Z,fast,0\n").unwrap();
    let err = stderr_of(&["events", "--speeds", "bad.csv", "--out", "e.csv"], d);
    assert!(err.starts_with("nexica: [ingest]"), "{err}");

    let err = stderr_of(&["report", "nowhere"], d);
    assert!(err.starts_with("nexica: [report]"), "{err}");

    fs::write(d.join("cfg.toml"), "speeds = \"x.csv\"\nunknown_key = 1\n").unwrap();
    let err = stderr_of(&["run", "--config", "cfg.toml"], d);
    assert!(err.starts_with("nexica: [config]") && err.contains("unknown_key"), "{err}");
}
