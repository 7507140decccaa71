use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sacadrl::value_net::Widths;
use sacadrl::ValueNetwork;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sacadrl"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_net(dir: &Path, n_agents: usize) -> PathBuf {
    let path = dir.join(format!("net{n_agents}.json"));
    let widths = Widths {
        symmetric1: 16,
        symmetric2: 12,
        hidden: 8,
    };
    ValueNetwork::init_symmetric(n_agents, widths, 3)
        .unwrap()
        .save(&path)
        .unwrap();
    path
}

fn gen_cases(dir: &Path, name: &str, count: usize, agents: usize, seed: u64) -> PathBuf {
    let out = dir.join(name);
    let o = run(&[
        "gen-cases",
        "--count",
        &count.to_string(),
        "--agents",
        &agents.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

/// Exit code and the parsed single-line error.
fn failure(o: &Output) -> (i32, serde_json::Value) {
    let stderr = String::from_utf8(o.stderr.clone()).unwrap();
    let lines: Vec<_> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {stderr}");
    let v: serde_json::Value = serde_json::from_str(lines[0]).expect("json error line");
    assert!(v["message"].is_string());
    (o.status.code().unwrap(), v)
}

#[test]
fn gen_cases_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_cases(dir.path(), "a.jsonl", 200, 2, 42);
    let b = gen_cases(dir.path(), "b.jsonl", 200, 2, 42);
    let c = gen_cases(dir.path(), "c.jsonl", 200, 2, 43);
    let (a, b, c) = (
        fs::read(a).unwrap(),
        fs::read(b).unwrap(),
        fs::read(c).unwrap(),
    );
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.iter().filter(|&&x| x == b'\n').count(), 200);
}

#[test]
fn rollout_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let net = small_net(dir.path(), 2);
    let cases = gen_cases(dir.path(), "cases.jsonl", 4, 2, 1);
    let mut files = Vec::new();
    for name in ["t1.jsonl", "t2.jsonl"] {
        let out = dir.path().join(name);
        let o = run(&[
            "rollout",
            "--checkpoint",
            s(&net),
            "--cases",
            s(&cases),
            "--out",
            s(&out),
            "--epsilon",
            "0",
            "--seed",
            "5",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        files.push(fs::read(out).unwrap());
    }
    assert!(!files[0].is_empty());
    assert_eq!(files[0], files[1]);
    let trajs = sacadrl::sim::load_trajectories(dir.path().join("t1.jsonl")).unwrap();
    assert_eq!(trajs.len(), 4);
}

#[test]
fn eval_writes_metrics_table() {
    let dir = tempfile::tempdir().unwrap();
    let net = small_net(dir.path(), 2);
    let cases = gen_cases(dir.path(), "cases.jsonl", 3, 2, 9);
    let out = dir.path().join("metrics.csv");
    let o = run(&[
        "eval",
        "--checkpoint",
        s(&net),
        "--cases",
        s(&cases),
        "--out",
        s(&out),
        "--mirror",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], sacadrl::eval::CSV_HEADER);
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("net2-none,2,"));
    assert_eq!(lines[1].split(',').count(), 13);
}

#[test]
fn inspect_prints_summary() {
    let dir = tempfile::tempdir().unwrap();
    let net = small_net(dir.path(), 3);
    let o = run(&["inspect", "--checkpoint", s(&net)]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("3 agents"), "{text}");
}

#[test]
fn arity_mismatch_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let net = small_net(dir.path(), 2);
    let cases = gen_cases(dir.path(), "cases.jsonl", 2, 3, 0);
    let out = dir.path().join("t.jsonl");
    let o = run(&[
        "rollout",
        "--checkpoint",
        s(&net),
        "--cases",
        s(&cases),
        "--out",
        s(&out),
    ]);
    let (code, err) = failure(&o);
    assert_eq!(code, 3);
    assert_eq!(err["error"], "data");
    assert!(!out.exists());
}

#[test]
fn missing_files_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let net = small_net(dir.path(), 2);
    let missing = dir.path().join("nope.jsonl");
    let out = dir.path().join("t.jsonl");
    let o = run(&[
        "rollout",
        "--checkpoint",
        s(&net),
        "--cases",
        s(&missing),
        "--out",
        s(&out),
    ]);
    assert_eq!(failure(&o).0, 3);
    let o = run(&["inspect", "--checkpoint", s(&missing)]);
    assert_eq!(failure(&o).0, 3);
    let o = run(&["train", "--config", s(&missing), "--out", s(dir.path())]);
    let (code, err) = failure(&o);
    assert_eq!(code, 2);
    assert_eq!(err["error"], "config");
}

#[test]
fn malformed_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for (i, text) in [
        "[sim]\nbogus = 1\n",
        "[training\n",
        "[training]\nmirror_prob = 2.0\n",
    ]
    .iter()
    .enumerate()
    {
        let cfg = dir.path().join(format!("bad{i}.toml"));
        fs::write(&cfg, text).unwrap();
        let o = run(&[
            "train",
            "--config",
            s(&cfg),
            "--out",
            s(&dir.path().join("run")),
        ]);
        let (code, err) = failure(&o);
        assert_eq!(code, 2, "{text}");
        assert_eq!(err["error"], "config");
    }
    let o = run(&["gen-cases", "--count", "x"]);
    assert_eq!(failure(&o).0, 2);
}

#[test]
fn train_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "[network]\nwidths = { symmetric1 = 16, symmetric2 = 12, hidden = 8 }\n\
         [training]\nepisodes = 4\ntarget_update_interval = 2\nbootstrap_episodes = 40\n\
         validation_cases = 2\nrollouts_per_episode = 2\nbatch_good = 32\nbatch_bad = 8\n\
         divergence_success_rate = 0.0\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = run(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let echoed = sacadrl::RunConfig::load(out.join("config.toml")).unwrap();
    assert_eq!(echoed, sacadrl::RunConfig::load(&cfg).unwrap());
    let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    for name in [
        "checkpoint_00002.json",
        "checkpoint_00004.json",
        "final.json",
    ] {
        ValueNetwork::load(out.join(name)).unwrap();
    }
}

#[test]
fn training_failure_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    // too little time for any agent to arrive
    fs::write(
        &cfg,
        "[sim]\nt_max_factor = 0.5\n\
         [network]\nwidths = { symmetric1 = 16, symmetric2 = 12, hidden = 8 }\n\
         [training]\nepisodes = 6\ntarget_update_interval = 1\nbootstrap_episodes = 20\n\
         validation_cases = 2\nrollouts_per_episode = 2\nbatch_good = 32\nbatch_bad = 8\n\
         divergence_patience = 2\n",
    )
    .unwrap();
    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("run")),
    ]);
    let (code, err) = failure(&o);
    assert_eq!(code, 4);
    assert_eq!(err["error"], "divergence");
}
