use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ckil(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ckil")).current_dir(dir).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn generate(dir: &Path, n: &str, out: &str) -> Output {
    ckil(dir, &["generate", "--env", "cartpole", "--n-traj", n, "--seed", "1", "--out", out])
}

#[test]
fn missing_env_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let o = ckil(d.path(), &["generate", "--n-traj", "2", "--out", "x.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--env"));
    assert!(!d.path().join("x.jsonl").exists());
}

#[test]
fn unknown_env_and_flag_are_usage_errors() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(ckil(d.path(), &["generate", "--env", "pendulum", "--out", "x"]).status.code(), Some(2));
    assert_eq!(ckil(d.path(), &["probe", "--bogus"]).status.code(), Some(2));
}

#[test]
fn generate_is_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    assert!(generate(d.path(), "2", "a.jsonl").status.success());
    assert!(generate(d.path(), "2", "b.jsonl").status.success());
    let a = fs::read(d.path().join("a.jsonl")).unwrap();
    let b = fs::read(d.path().join("b.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    let episodes: std::collections::BTreeSet<u64> = String::from_utf8(a)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["episode_id"].as_u64().unwrap())
        .collect();
    assert_eq!(episodes.len(), 2);
}

#[test]
fn manifest_records_config_and_artifacts() {
    let d = tempfile::tempdir().unwrap();
    assert!(generate(d.path(), "2", "out/demos.jsonl").status.success());
    let m: serde_json::Value = serde_json::from_slice(&fs::read(d.path().join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "generate");
    assert_eq!(m["config"]["n_traj"], 2);
    assert_eq!(m["artifacts"][0], "demos.jsonl");
    assert_eq!(m["input_hash"].as_str().unwrap().len(), 64);
    assert!(m["started_at"].is_string());
}

#[test]
fn zero_bandwidth_is_rejected_before_training() {
    let d = tempfile::tempdir().unwrap();
    assert!(generate(d.path(), "1", "d.jsonl").status.success());
    let o = ckil(d.path(), &["train", "--env", "cartpole", "--data", "d.jsonl", "--h2", "0", "--out-dir", "t"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("h2"), "{}", stderr(&o));
    assert!(!d.path().join("t").exists());
}

#[test]
fn bad_datasets_are_input_errors() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("empty.jsonl"), "").unwrap();
    let o = ckil(d.path(), &["train", "--env", "cartpole", "--data", "empty.jsonl", "--out-dir", "t"]);
    assert_eq!(o.status.code(), Some(3));

    fs::write(d.path().join("bad.jsonl"), "{\"episode_id\":0,\"step_index\":0,\"state\":[0,0,0,0],\"action\":1}\n{\"episode_id\":0}\n").unwrap();
    let o = ckil(d.path(), &["train", "--env", "cartpole", "--data", "bad.jsonl", "--out-dir", "t"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let o = ckil(d.path(), &["train", "--env", "cartpole", "--data", "missing.jsonl", "--out-dir", "t"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("missing.jsonl"));

    // MountainCar states in a CartPole run.
    assert!(ckil(d.path(), &["generate", "--env", "mountaincar", "--n-traj", "1", "--out", "mc.jsonl"]).status.success());
    let o = ckil(d.path(), &["train", "--env", "cartpole", "--data", "mc.jsonl", "--out-dir", "t"]);
    assert_eq!(o.status.code(), Some(3));
}

fn loss_column(path: &Path, col: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == col).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].parse().unwrap()).collect()
}

#[test]
fn ckil_and_bc_checkpoints_share_a_schema() {
    let d = tempfile::tempdir().unwrap();
    assert!(generate(d.path(), "1", "d.jsonl").status.success());
    let base = ["train", "--env", "cartpole", "--data", "d.jsonl", "--iters", "150", "--lambda", "0.1"];
    let o = ckil(d.path(), &[&base[..], &["--out-dir", "ck"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = ckil(d.path(), &[&base[..], &["--algo", "bc", "--out-dir", "bc"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));

    let read = |p: &str| -> serde_json::Value { serde_json::from_slice(&fs::read(d.path().join(p)).unwrap()).unwrap() };
    let (ck, bc) = (read("ck/checkpoint.json"), read("bc/checkpoint.json"));
    let keys = |v: &serde_json::Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
    assert_eq!(keys(&ck), keys(&bc));
    assert_eq!(ck["algo"], "ckil");
    assert_eq!(bc["algo"], "bc");
    assert_eq!(ck["shape"]["param_count"], ck["policy"]["params"]["data"].as_array().unwrap().len());
    assert!(d.path().join("ck/cache.jsonl").exists());

    for dir in ["ck", "bc"] {
        let best = loss_column(&d.path().join(dir).join("loss.csv"), "best_smoothed");
        assert_eq!(best.len(), 150);
        assert!(best.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn eval_reports_both_modes_and_checks_env() {
    let d = tempfile::tempdir().unwrap();
    assert!(generate(d.path(), "1", "d.jsonl").status.success());
    let o = ckil(d.path(), &["train", "--env", "cartpole", "--data", "d.jsonl", "--iters", "50", "--out-dir", "t"]);
    assert!(o.status.success());
    let o = ckil(d.path(), &["eval", "--checkpoint", "t/checkpoint.json", "--episodes", "4", "--out-dir", "e"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let e: serde_json::Value = serde_json::from_slice(&fs::read(d.path().join("e/eval.json")).unwrap()).unwrap();
    assert_eq!(e["report"]["policy_mode"], "sampled");
    assert_eq!(e["alongside"]["policy_mode"], "argmax");
    assert_eq!(e["report"]["n_episodes"], 4);

    let o = ckil(d.path(), &["eval", "--checkpoint", "t/checkpoint.json", "--env", "acrobot", "--out-dir", "e2"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ckil(d.path(), &["eval", "--out-dir", "e3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("run.toml"), "env = \"cartpole\"\nn_traj = 2\nseed = 1\n").unwrap();
    let o = ckil(d.path(), &["--config", "run.toml", "generate", "--out", "a.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = ckil(d.path(), &["--config", "run.toml", "generate", "--n-traj", "1", "--out", "b/b.jsonl"]);
    assert!(o.status.success());
    let count = |p: &str| {
        let text = fs::read_to_string(d.path().join(p)).unwrap();
        text.lines().map(|l| l.split(',').next().unwrap().to_string()).collect::<std::collections::BTreeSet<_>>().len()
    };
    assert_eq!(count("a.jsonl"), 2);
    assert_eq!(count("b/b.jsonl"), 1);

    fs::write(d.path().join("typo.toml"), "n_trajs = 2\n").unwrap();
    let o = ckil(d.path(), &["--config", "typo.toml", "generate", "--env", "cartpole", "--out", "c.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n_trajs"));
}

#[test]
fn help_lists_defaults() {
    let d = tempfile::tempdir().unwrap();
    let o = ckil(d.path(), &["sweep", "--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for needle in ["[default: 10]", "[default: 1000]", "[default: 300]", "[default: 0.25]", "--config", "--threads"] {
        assert!(text.contains(needle), "missing {needle}");
    }
}

#[test]
fn probe_and_sweep_write_reports() {
    let d = tempfile::tempdir().unwrap();
    let o = ckil(d.path(), &["--threads", "1", "probe", "--n", "50,200", "--replicates", "1", "--out-dir", "p"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let errs = loss_column(&d.path().join("p/probe.csv"), "mean_abs_error");
    assert_eq!(errs.len(), 2);
    assert_eq!(ckil(d.path(), &["probe", "--n", "200,50", "--out-dir", "p2"]).status.code(), Some(2));

    let o = ckil(
        d.path(),
        &["sweep", "--env", "cartpole", "--counts", "1", "--repeats", "2", "--pool-size", "3", "--iters", "20", "--episodes", "2", "--out-dir", "s"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = loss_column(&d.path().join("s/sweep.csv"), "mean_return");
    assert_eq!(rows.len(), 2 + 2 * 2);
    let o = ckil(d.path(), &["sweep", "--env", "cartpole", "--counts", "5", "--pool-size", "3", "--out-dir", "s2"]);
    assert_eq!(o.status.code(), Some(2));
}
