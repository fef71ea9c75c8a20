use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TOA_VARS: [&str; 11] = [
    "TOA_BACKEND",
    "TOA_SCRIPT",
    "TOA_SEED",
    "TOA_TEMPERATURE",
    "TOA_PKH_DIR",
    "TOA_PROMPTS_DIR",
    "TOA_FIXTURES",
    "TOA_FRESH_PKH",
    "TOA_SINGLE_THREADED",
    "TOA_MAX_STEPS",
    "TOA_MAX_DEPTH",
];

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn toa(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_toa"));
    for v in TOA_VARS {
        cmd.env_remove(v);
    }
    cmd.args(args).envs(env.iter().copied()).output().expect("toa binary runs")
}

fn run_walkthrough(out: &Path, extra: &[&str], env: &[(&str, &str)]) -> Output {
    let fw = fixture("walkthrough").join("firmware");
    let cfg = fixture("walkthrough").join("config.toml");
    let mut args = vec![
        "run",
        "--firmware",
        fw.to_str().unwrap(),
        "--task",
        "T5",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--fresh-pkh",
    ];
    args.extend_from_slice(extra);
    toa(&args, env)
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

#[test]
fn run_writes_all_artifacts() {
    let out = tempfile::tempdir().unwrap();
    let o = run_walkthrough(out.path(), &[], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "metrics.json", "events.ndjson", "pkh.ndjson", "toa.json"] {
        assert!(out.path().join(f).is_file(), "missing {f}");
    }
    let r = report(out.path());
    assert_eq!(r["alerts"].as_array().unwrap().len(), 1);
    assert_eq!(r["metadata"]["seed"], 42);
    assert!(String::from_utf8_lossy(&o.stdout).contains("1 alerts"));
}

#[test]
fn flags_beat_env_beat_file() {
    let out = tempfile::tempdir().unwrap();
    let o = run_walkthrough(out.path(), &[], &[("TOA_SEED", "5")]);
    assert!(o.status.success());
    assert_eq!(report(out.path())["metadata"]["seed"], 5);

    let out = tempfile::tempdir().unwrap();
    let o = run_walkthrough(out.path(), &["--seed", "11"], &[("TOA_SEED", "5")]);
    assert!(o.status.success());
    assert_eq!(report(out.path())["metadata"]["seed"], 11);

    let out = tempfile::tempdir().unwrap();
    let o = run_walkthrough(out.path(), &["--max-depth", "1"], &[("TOA_MAX_DEPTH", "3")]);
    assert!(o.status.success());
    assert_eq!(report(out.path())["metrics"]["max_depth"], 1);
}

#[test]
fn canonical_runs_match_byte_for_byte() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(run_walkthrough(a.path(), &["--canonical"], &[]).status.success());
    assert!(run_walkthrough(b.path(), &["--canonical"], &[]).status.success());
    for f in ["report.json", "events.ndjson", "metrics.json"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn stability_then_cdf() {
    let out = tempfile::tempdir().unwrap();
    let fw = fixture("components").join("firmware");
    let cfg = fixture("components").join("config.toml");
    let o = toa(
        &[
            "stability",
            "--firmware",
            fw.to_str().unwrap(),
            "--runs",
            "3",
            "--task",
            "T2",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.path().to_str().unwrap(),
        ],
        &[],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let st: Value = serde_json::from_str(&std::fs::read_to_string(out.path().join("stability.json")).unwrap()).unwrap();
    let e = &st["entries"][0];
    assert_eq!(e["jaccard_mean"], 1.0);
    assert_eq!(e["agent_count"]["std"], 0.0);

    let csv = out.path().join("agents.csv");
    let o = toa(
        &["cdf", "--metric", "agent_count", "--out", csv.to_str().unwrap(), out.path().to_str().unwrap()],
        &[],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "agent_count,fraction");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].ends_with(",1"));
}

#[test]
fn stability_rejects_a_single_run() {
    let out = tempfile::tempdir().unwrap();
    let fw = fixture("walkthrough").join("firmware");
    let cfg = fixture("walkthrough").join("config.toml");
    let o = toa(
        &[
            "stability",
            "--firmware",
            fw.to_str().unwrap(),
            "--runs",
            "1",
            "--task",
            "T5",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.path().to_str().unwrap(),
        ],
        &[],
    );
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("at least 2 runs"));
}

#[test]
fn root_failure_exits_two_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("fail.json");
    std::fs::write(
        &script,
        r#"{"rules": [], "default": {"thought": "t", "action": "finish", "action_input": "no firmware here", "status": "failure"}}"#,
    )
    .unwrap();
    let fw = dir.path().join("fw");
    std::fs::create_dir(&fw).unwrap();
    let out = dir.path().join("out");
    let o = toa(
        &[
            "run",
            "--firmware",
            fw.to_str().unwrap(),
            "--task",
            "T3",
            "--backend",
            "scripted",
            "--script",
            script.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("report.json").is_file());
}

#[test]
fn bad_inputs_fail_cleanly() {
    let out = tempfile::tempdir().unwrap();
    let o = toa(&["cdf", "--metric", "nope", out.path().to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown metric"));

    let o = toa(
        &["run", "--firmware", "/nonexistent/fw", "--task", "T1", "--out", out.path().to_str().unwrap()],
        &[],
    );
    assert_eq!(o.status.code(), Some(1));

    let o = toa(&["tasks"], &[]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 5);
}
