use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lmc(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmc"))
        .args(args)
        .env("LMC_OUT_DIR", out_dir)
        .output()
        .expect("binary runs")
}

const CONFIG: &str = r#"
seed = 1
episodes = 6
out_dir = "ignored-because-env-wins"
[env]
name = "riverswim"
n = 4
horizon = 6
[agent]
name = "lsvi_ucb"
"#;

#[test]
fn run_writes_under_env_out_dir_and_report_reads_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("out");
    let o = lmc(&["run", "--config", cfg.to_str().unwrap(), "--set", "seed=5"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = String::from_utf8(o.stdout).unwrap().lines().next().unwrap().to_string();
    assert!(Path::new(&run_dir).starts_with(&out));
    assert!(run_dir.ends_with("/5"));
    for f in ["episodes.jsonl", "summary.csv", "env.json", "timing.jsonl"] {
        assert!(Path::new(&run_dir).join(f).is_file(), "{f}");
    }
    for f in ["episodes.jsonl", "timing.jsonl"] {
        for line in fs::read_to_string(Path::new(&run_dir).join(f)).unwrap().lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["schema"], "v1", "{f}: {line}");
        }
    }
    let pattern = format!("{}/*/*/episodes.jsonl", out.display());
    let r = lmc(&["report", "--glob", &pattern], &out);
    assert!(r.status.success());
    let text = String::from_utf8(r.stdout).unwrap();
    assert!(text.starts_with("fingerprint,"));
    assert_eq!(text.lines().count(), 2);

    let snapshot = Path::new(&run_dir).join("env.json");
    let o = lmc(&["oracle", "--env", snapshot.to_str().unwrap()], &out);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["schema"], "v1");
}

#[test]
fn errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lmc(&["run", "--config", "/nonexistent.toml"], dir.path()).status.code(), Some(1));
    assert_eq!(lmc(&["oracle", "--env", "nosuchenv"], dir.path()).status.code(), Some(1));
    assert_eq!(lmc(&["report", "--glob", "/nonexistent/*.jsonl"], dir.path()).status.code(), Some(1));
}

#[test]
fn verify_posterior_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = lmc(&["verify-posterior"], dir.path());
    assert_eq!(ok.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(v["pass"], true);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"chain_eta_scale": 2.0}"#).unwrap();
    assert_eq!(lmc(&["verify-posterior", "--fixture", bad.to_str().unwrap()], dir.path()).status.code(), Some(2));
}

#[test]
fn oracle_prints_optimal_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = lmc(&["oracle", "--env", "nchain:n=5"], dir.path());
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["optimal_value"], 11.0);
    assert_eq!(v["horizon"], 14);
}

#[test]
fn sweep_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.toml");
    fs::write(
        &grid,
        r#"
seeds = [0, 1]
[base]
episodes = 4
env = { name = "riverswim", n = 3, horizon = 4 }
agent = { name = "lsvi_ucb" }
[grid]
"agent.bonus" = [0.1, 1.0]
"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = lmc(&["sweep", "--grid", grid.to_str().unwrap()], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep-grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(csv.lines().filter(|l| l.ends_with(",true")).count(), 1);
}
