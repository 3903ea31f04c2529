use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use energy_policy::cli::{RunConfig, EXIT_CORRUPT, EXIT_OK, EXIT_TRAIN, EXIT_USAGE};
use energy_policy::train::read_results_table;

const SMALL: &str = r#"
[policy]
d_obs = 1
d_action = 1
pred_horizon = 4
exec_horizon = 2
d_model = 8
heads = 2
depth = 1
head_width = 8
head_depth = 1
noise_dim = 4

[train]
epochs = 2
batch_size = 32
learning_rate = 1e-3
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_energy-policy")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert_eq!(
        out.status.code(),
        Some(EXIT_OK),
        "{args:?}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> Option<i32> {
    run(args).status.code()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Dataset plus small config in a fresh temp dir.
fn fixture() -> (tempfile::TempDir, String, String) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.epds");
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    ok(&["gen-data", "--env", "line_reach", "--episodes", "6", "--seed", "1", "--out", s(&data)]);
    (dir, s(&data).to_string(), s(&cfg).to_string())
}

#[test]
fn pipeline_runs_and_echoes_config() {
    let (dir, data, cfg) = fixture();
    let run_dir = dir.path().join("run");
    let out = ok(&["train", "--data", &data, "--config", &cfg, "--out-dir", s(&run_dir)]);
    assert!(out.contains("epoch    2"), "{out}");
    let ckpt = run_dir.join("final.ckpt");
    assert!(ckpt.exists());
    let curve = fs::read_to_string(run_dir.join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);

    let echoed = RunConfig::from_toml(&fs::read_to_string(run_dir.join("config.toml")).unwrap()).unwrap();
    assert_eq!(echoed.train.epochs, 2);
    assert_eq!(echoed.policy.d_model, 8);
    assert_eq!(echoed.data.seed, 1);

    let ev = dir.path().join("eval");
    let out = ok(&["eval", "--ckpt", s(&ckpt), "--episodes", "4", "--out", s(&ev)]);
    assert!(out.starts_with("success rate"), "{out}");
    for f in ["config.toml", "rollouts.csv", "trajectories.csv"] {
        assert!(ev.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(ev.join("rollouts.csv")).unwrap().lines().count(), 5);

    let out = ok(&["coverage", "--ckpt", s(&ckpt), "--samples", "3"]);
    assert!(out.contains("modes over 3 samples"), "{out}");

    let bench = dir.path().join("bench.csv");
    ok(&["bench", "--ckpts", &format!("{0},{0}", s(&ckpt)), "--reps", "3", "--warmup", "1", "--inner", "1", "--out", s(&bench)]);
    let csv = fs::read_to_string(&bench).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",3,1")), "{csv}");

    let out = ok(&["inspect", "--ckpt", s(&ckpt)]);
    assert!(out.starts_with("format EPCK1\nenv line_reach\nepoch 2\n"), "{out}");
    let out = ok(&["inspect", "--data", &data]);
    assert!(out.contains("episodes 6"), "{out}");
}

#[test]
fn subcommands_are_deterministic() {
    let (dir, data, cfg) = fixture();
    let again = dir.path().join("again.epds");
    ok(&["gen-data", "--env", "line_reach", "--episodes", "6", "--seed", "1", "--out", s(&again)]);
    assert_eq!(fs::read(&data).unwrap(), fs::read(&again).unwrap());

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["train", "--data", &data, "--config", &cfg, "--seed", "4", "--out-dir", s(&a)]);
    ok(&["train", "--data", &data, "--config", &cfg, "--seed", "4", "--out-dir", s(&b)]);
    assert_eq!(fs::read(a.join("final.ckpt")).unwrap(), fs::read(b.join("final.ckpt")).unwrap());

    let ea = ok(&["eval", "--ckpt", s(&a.join("final.ckpt")), "--episodes", "3", "--seed", "9"]);
    let eb = ok(&["eval", "--ckpt", s(&b.join("final.ckpt")), "--episodes", "3", "--seed", "9"]);
    assert_eq!(ea, eb);
}

#[test]
fn ablate_writes_a_table_per_cell() {
    let (dir, data, cfg) = fixture();
    let out_dir = dir.path().join("ab");
    ok(&[
        "ablate", "--grid", "alpha=0.5,1.0", "--grid", "adaln_mode=adaln,concat", "--data", &data, "--config", &cfg,
        "--samples", "2", "--out-dir", s(&out_dir),
    ]);
    let rows = read_results_table(out_dir.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(out_dir.join("config.toml").exists());
}

#[test]
fn exit_codes() {
    let (dir, data, cfg) = fixture();
    let out = |n: &str| dir.path().join(n).to_str().unwrap().to_string();

    assert_eq!(code(&["frobnicate"]), Some(EXIT_USAGE));
    assert_eq!(code(&["train", "--data", &data]), Some(EXIT_USAGE));
    let r = run(&["train", "--data", &data, "--config", &cfg, "--alpha", "2.5", "--out-dir", &out("x")]);
    assert_eq!(r.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&r.stderr).contains("alpha"));
    assert_eq!(code(&["gen-data", "--env", "moon", "--out", &out("m.epds")]), Some(EXIT_USAGE));
    assert_eq!(code(&["ablate", "--grid", "depth=1,2", "--data", &data, "--out-dir", &out("ab")]), Some(EXIT_USAGE));

    let bad_cfg = out("bad.toml");
    fs::write(&bad_cfg, "[policy]\nwidht = 3\n").unwrap();
    assert_eq!(code(&["train", "--data", &data, "--config", &bad_cfg, "--out-dir", &out("y")]), Some(EXIT_USAGE));

    let fork = out("fork.epds");
    ok(&["gen-data", "--env", "forked_paths", "--episodes", "2", "--out", &fork]);
    let r = run(&["train", "--data", &fork, "--config", &cfg, "--out-dir", &out("v")]);
    assert_eq!(r.status.code(), Some(EXIT_USAGE));
    let msg = String::from_utf8_lossy(&r.stderr);
    assert!(msg.contains("d_obs=1") && msg.contains("d_obs=2"), "{msg}");

    // weights of order 1e200 overflow the forward pass
    let r = run(&["train", "--data", &data, "--config", &cfg, "--lr", "1e200", "--out-dir", &out("z")]);
    assert_eq!(r.status.code(), Some(EXIT_TRAIN));
    assert!(String::from_utf8_lossy(&r.stderr).contains("batch seed"));

    let junk = out("junk");
    fs::write(&junk, "hello").unwrap();
    let r = run(&["inspect", "--ckpt", &junk]);
    assert_eq!(r.status.code(), Some(EXIT_CORRUPT));
    let msg = String::from_utf8_lossy(&r.stderr);
    assert!(msg.contains("EPCK1") && msg.contains("EPDS1"), "{msg}");
    assert_eq!(code(&["eval", "--ckpt", &junk]), Some(EXIT_CORRUPT));
    assert_eq!(code(&["train", "--data", &junk, "--out-dir", &out("w")]), Some(EXIT_CORRUPT));
    assert_eq!(code(&["eval", "--ckpt", &out("missing.ckpt")]), Some(EXIT_CORRUPT));

    let mut text = fs::read_to_string(&data).unwrap();
    text.truncate(text.len() - 40);
    let cut = out("cut.epds");
    fs::write(&cut, text).unwrap();
    assert_eq!(code(&["inspect", "--data", &cut]), Some(EXIT_CORRUPT));
}

#[test]
fn noise_flags_warn_for_deterministic_heads() {
    let (dir, data, cfg) = fixture();
    let r = run(&[
        "train", "--data", &data, "--config", &cfg, "--head", "l2", "--noise-dist", "gauss", "--out-dir",
        dir.path().join("l2").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(EXIT_OK));
    assert!(String::from_utf8_lossy(&r.stderr).contains("warning"));
}

#[test]
fn shipped_checkpoint_solves_forked_paths() {
    let ckpt = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../artifacts/forked_paths_energy.ckpt");
    let out = ok(&["eval", "--ckpt", s(&ckpt), "--episodes", "50"]);
    let rate: f64 = out.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!(rate >= 0.8, "{out}");

    let one = ok(&["eval", "--ckpt", s(&ckpt), "--episodes", "1"]);
    assert!(one.contains("/1)"), "{one}");
    let cov = ok(&["coverage", "--ckpt", s(&ckpt)]);
    assert!(cov.contains("modes over 50 samples"), "{cov}");
}
