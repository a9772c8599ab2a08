use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn mcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcast"))
        .args(args)
        .output()
        .expect("spawn mcast")
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

const SMALL: &str = r#"{"experiment_id": "small", "algorithm": "mc_allgather", "processes": 8, "buffer_size": 16384, "chains": 2}"#;

#[test]
fn run_writes_csv_and_trace() {
    let dir = TempDir::new().unwrap();
    let config = write(dir.path(), "c.json", SMALL);
    let csv = dir.path().join("out.csv");
    let trace = dir.path().join("trace.jsonl");
    let out = mcast(&[
        "--quiet",
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("experiment_id,algorithm,P,N,mtu,S,M,transport,drop_prob,seed,iteration,total_link_bytes"));
    assert!(header.ends_with("schema_version,wall_clock_s"));
    assert_eq!(lines.count(), 1);
    let events = fs::read_to_string(&trace).unwrap();
    assert!(events.lines().count() > 8);
    for line in events.lines() {
        serde_json::from_str::<serde_json::Value>(line).expect("trace line is JSON");
    }
}

#[test]
fn run_to_stdout_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let config = write(
        dir.path(),
        "c.json",
        r#"{"algorithm": "mc_allgather", "processes": 8, "buffer_size": 32768, "drop_prob": 0.02, "iterations": 2}"#,
    );
    let strip = |s: String| -> Vec<String> {
        s.lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    let args = ["--quiet", "run", "--config", config.to_str().unwrap(), "--seed", "7"];
    let a = mcast(&args);
    let b = mcast(&args);
    assert!(a.status.success());
    let (a, b) = (strip(stdout(&a)), strip(stdout(&b)));
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
    assert!(a[1].contains(",7,0,"), "seed override applies: {}", a[1]);
}

#[test]
fn compare_one_config_two_algorithms() {
    let dir = TempDir::new().unwrap();
    let config = write(dir.path(), "c.json", r#"{"processes": 16, "buffer_size": 65536}"#);
    let out = mcast(&["--quiet", "compare", "--config", config.to_str().unwrap(), "mc_allgather", "ring_allgather"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).lines().any(|l| l == "ratio,1.875"), "{}", stdout(&out));
}

#[test]
fn compare_identical_configs_is_one() {
    let dir = TempDir::new().unwrap();
    let a = write(dir.path(), "a.json", SMALL);
    let b = write(dir.path(), "b.json", SMALL);
    let csv = dir.path().join("cmp.csv");
    let out = mcast(&[
        "--quiet",
        "compare",
        "--config",
        a.to_str().unwrap(),
        "--config",
        b.to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(stdout(&out).lines().any(|l| l == "ratio,1"));
    assert_eq!(fs::read_to_string(csv).unwrap().lines().count(), 3);
}

#[test]
fn compare_rejects_wrong_arity() {
    let dir = TempDir::new().unwrap();
    let a = write(dir.path(), "a.json", SMALL);
    let out = mcast(&["--quiet", "compare", "--config", a.to_str().unwrap(), "mc_allgather"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_keeps_expansion_order() {
    let dir = TempDir::new().unwrap();
    let config = write(dir.path(), "t.json", SMALL);
    let out = mcast(&[
        "--quiet",
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--param",
        "processes=4,8,16",
        "--param",
        "topology.core_switches=1,2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows: Vec<String> = stdout(&out).lines().skip(1).map(str::to_string).collect();
    assert_eq!(rows.len(), 6);
    let ps: Vec<&str> = rows.iter().map(|r| r.split(',').nth(3).unwrap()).collect();
    assert_eq!(ps, ["4", "4", "8", "8", "16", "16"]);
}

#[test]
fn sweep_unknown_key_is_config_error() {
    let dir = TempDir::new().unwrap();
    let config = write(dir.path(), "t.json", SMALL);
    let out = mcast(&["sweep", "--config", config.to_str().unwrap(), "--param", "bogus=1,2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn model_prints_table() {
    let out = mcast(&["model", "--processes", "2"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.starts_with("quantity,value,unit"));
    assert!(text.lines().any(|l| l.starts_with("speedup_mc_inc,1.0,")), "{text}");
}

#[test]
fn validate_config_exit_codes() {
    let dir = TempDir::new().unwrap();
    let good = write(dir.path(), "good.json", SMALL);
    assert!(mcast(&["validate-config", "--config", good.to_str().unwrap()]).status.success());
    for (name, body) in [
        ("syntax.json", "{not json"),
        ("unknown.json", r#"{"processes": 4, "colour": "blue"}"#),
        ("indivisible.json", r#"{"algorithm": "mc_allgather", "processes": 6, "chains": 4}"#),
        ("too_many.json", r#"{"processes": 64}"#),
    ] {
        let path = write(dir.path(), name, body);
        let out = mcast(&["validate-config", "--config", path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2), "{name}");
        assert!(!out.stderr.is_empty());
    }
    let missing = dir.path().join("absent.json");
    assert_eq!(
        mcast(&["run", "--config", missing.to_str().unwrap()]).status.code(),
        Some(2)
    );
}
