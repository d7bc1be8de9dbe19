use std::fs;

use lmc_rl::env::{EpisodicMdp, InitialState, Policy};
use lmc_rl::harness::{
    aggregate, compute_regret, emit_report, parse_report, run_and_save, run_experiment, run_experiment_with, summary_csv,
    sweep, verify_posterior_cmd, LinearRun, NeuralRun, RunConfig, SweepGrid, SUMMARY_HEADER,
};
use lmc_rl::par::Execution;
use lmc_rl::posterior::PosteriorFixture;

/// Three states, two steps. From state 0, action 0 leads to state 1 (worth
/// 1 next step) and action 1 pays 0.5 now and leads to state 2 (worth 0.2).
fn three_state() -> EpisodicMdp {
    let (s, a, h) = (3, 2, 2);
    let mut trans = vec![0.0; h * s * a * s];
    let mut put = |hh: usize, ss: usize, aa: usize, to: usize| trans[((hh * s + ss) * a + aa) * s + to] = 1.0;
    put(0, 0, 0, 1);
    put(0, 0, 1, 2);
    for hh in 0..h {
        for aa in 0..a {
            put(hh, 1, aa, 1);
            put(hh, 2, aa, 2);
            if hh == 1 {
                put(hh, 0, aa, 0);
            }
        }
    }
    let mut rewards = vec![0.0; h * s * a];
    rewards[1] = 0.5;
    rewards[(s + 1) * a] = 1.0;
    rewards[(s + 2) * a] = 0.2;
    rewards[(s + 2) * a + 1] = 0.2;
    EpisodicMdp::new("three", s, a, h, false, trans, rewards, InitialState::Fixed(0)).unwrap()
}

#[test]
fn uniform_policy_regret_by_hand() {
    let mdp = three_state();
    // V* = 1; uniform: 0.5 * (0 + 0.5) + 0.5 * (0.5 + 0.2) = 0.6
    let curve = compute_regret(&mdp, &[Policy::uniform(3, 2, 2), Policy::uniform(3, 2, 2)]).unwrap();
    assert!((curve.optimal_value - 1.0).abs() < 1e-15);
    assert!((curve.per_episode[0] - 0.4).abs() < 1e-15);
    assert!((curve.cumulative[1] - 0.8).abs() < 1e-15);
    let optimal = Policy::deterministic(3, 2, 2, &[0; 6]);
    assert_eq!(compute_regret(&mdp, &[optimal]).unwrap().cumulative, vec![0.0]);
    assert!(compute_regret(&mdp, &[Policy::uniform(3, 2, 5)]).is_err());
}

const LINEAR: &str = r#"
seed = 4
episodes = 12
[env]
name = "riverswim"
n = 5
horizon = 8
[agent]
name = "lmc_lsvi"
updates = 10
chains = 2
"#;

const NEURAL: &str = r#"
seed = 2
total_steps = 600
eval_every = 200
[env]
name = "nchain"
n = 6
[agent]
name = "lmc_dqn"
lr = 0.001
beta = 1e8
"#;

#[test]
fn report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_experiment(&RunConfig::parse(LINEAR, &[]).unwrap()).unwrap().0;
    let b = run_experiment(&RunConfig::parse(NEURAL, &[]).unwrap()).unwrap().0;
    assert_eq!(b.evals.len(), 3);
    let records = vec![a, b];
    emit_report(&records, dir.path()).unwrap();
    assert_eq!(parse_report(&dir.path().join("episodes.jsonl")).unwrap(), records);
    let text = fs::read_to_string(dir.path().join("episodes.jsonl")).unwrap();
    assert!(text.lines().all(|l| l.contains("\"schema\":\"v1\"")));
}

#[test]
fn empty_report() {
    let dir = tempfile::tempdir().unwrap();
    emit_report(&[], dir.path()).unwrap();
    assert_eq!(fs::read_to_string(dir.path().join("episodes.jsonl")).unwrap(), "");
    assert_eq!(fs::read_to_string(dir.path().join("summary.csv")).unwrap(), format!("{SUMMARY_HEADER}\n"));
}

#[test]
fn aggregate_by_hand() {
    let base = run_experiment(&RunConfig::parse(LINEAR, &[]).unwrap()).unwrap().0;
    let records: Vec<_> = [1.0, 2.0, 6.0]
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let mut r = base.clone();
            r.seed = i as u64;
            r.score = s;
            r
        })
        .collect();
    let rows = aggregate(&records);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].score_mean, 3.0);
    assert!((rows[0].score_se - (7.0f64 / 3.0).sqrt()).abs() < 1e-15);
    let csv = summary_csv(&records);
    let mean_line = csv.lines().find(|l| l.contains(",mean,")).unwrap();
    assert!(mean_line.ends_with(",3"));
}

#[test]
fn replay_is_byte_identical_in_both_execution_modes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::parse(LINEAR, &[]).unwrap();
    cfg.out_dir = Some(a.path().to_path_buf());
    let (_, da) = run_and_save(&cfg, Execution::Sequential).unwrap();
    cfg.out_dir = Some(b.path().to_path_buf());
    let (_, db) = run_and_save(&cfg, Execution::Parallel).unwrap();
    for f in ["episodes.jsonl", "summary.csv", "env.json", "config.toml"] {
        assert_eq!(fs::read(da.join(f)).unwrap(), fs::read(db.join(f)).unwrap(), "{f}");
    }
    assert!(da.ends_with(format!("{}/4", cfg.fingerprint())));
}

#[test]
fn linear_run_resumes_from_json() {
    let cfg = RunConfig::parse(LINEAR, &[]).unwrap();
    let mut run = LinearRun::new(&cfg, Execution::Sequential).unwrap();
    for _ in 0..5 {
        run.run_episode().unwrap();
    }
    let mut resumed: LinearRun = serde_json::from_str(&serde_json::to_string(&run).unwrap()).unwrap();
    for _ in 0..5 {
        run.run_episode().unwrap();
        resumed.run_episode().unwrap();
    }
    assert_eq!(run.rows, resumed.rows);
}

#[test]
fn neural_run_resumes_from_json() {
    let cfg = RunConfig::parse(NEURAL, &[]).unwrap();
    let mut run = NeuralRun::new(&cfg).unwrap();
    for _ in 0..150 {
        run.step().unwrap();
    }
    let mut resumed: NeuralRun = serde_json::from_str(&serde_json::to_string(&run).unwrap()).unwrap();
    assert_eq!(resumed, run);
    for _ in 0..100 {
        assert_eq!(run.step().unwrap(), resumed.step().unwrap());
    }
    assert_eq!(resumed, run);
}

#[test]
fn sweep_counts_and_degenerate_grid() {
    let g = SweepGrid::parse(
        r#"
seeds = [0, 1]
[base]
total_steps = 200
eval_every = 100
env = { name = "nchain", n = 4 }
agent = { name = "dqn", lr = 0.001 }
[grid]
"agent.lr" = [0.001, 0.0001]
"#,
    )
    .unwrap();
    let (summary, records) = sweep(&g, Execution::Parallel, false).unwrap();
    assert_eq!(records.len(), 4);
    assert_eq!(summary.cells.len(), 2);

    let single = SweepGrid { seeds: vec![7], base: g.base.clone(), grid: Default::default() };
    let (_, recs) = sweep(&single, Execution::Sequential, false).unwrap();
    let cfg = single.config(&Default::default(), 7).unwrap();
    assert_eq!(recs[0], run_experiment_with(&cfg, Execution::Sequential).unwrap().0);
}

#[test]
fn corrupted_posterior_fixture_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fixture.json");
    let bad = PosteriorFixture { chain_eta_scale: 2.0, replicas: 4000, ..Default::default() };
    fs::write(&path, serde_json::to_string(&bad).unwrap()).unwrap();
    let report = verify_posterior_cmd(Some(&path), Execution::Sequential).unwrap();
    assert!(!report.pass);
    assert_eq!(report.z_scores.len(), 3);
    assert!(verify_posterior_cmd(None, Execution::Sequential).unwrap().pass);
}
