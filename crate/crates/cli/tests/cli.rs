use std::path::Path;
use std::process::{Command, Output};

fn cresp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cresp"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

/// Small enough to train in a couple of seconds.
const TINY: &str = r#"
seeds = [1]
out_dir = "out"

[env]
grid_size = 5
episode_len = 20

[agent.encoder]
filters = 4
repr_dim = 8

[agent.sac]
hidden_dim = 16
batch_size = 4
init_steps = 40

[agent.predictor]
hidden_dim = 16
model_dim = 8
kappa = 4

[train]
steps = 120
eval_every = 60
eval_episodes = 2

[probe]
n = 60
hidden = 8
epochs = 2
eval_every = 1
seeds = 1
"#;

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[agent.sac]\nleraning_rate = 0.1\n").unwrap();
    let out = cresp(&["train", "-c", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("leraning_rate"));
    std::fs::write(dir.path().join("gamma.toml"), "[agent.sac]\ngamma = 1.2\n").unwrap();
    assert_eq!(cresp(&["train", "-c", "gamma.toml"], dir.path()).status.code(), Some(1));
    assert_eq!(cresp(&["train", "--no-such-flag"], dir.path()).status.code(), Some(1));
}

#[test]
fn oracle_verify_writes_passing_audit() {
    let dir = tempfile::tempdir().unwrap();
    let out = cresp(&["oracle-verify", "--out", "audit.csv"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rd = csv::Reader::from_path(dir.path().join("audit.csv")).unwrap();
    let pass_col = rd.headers().unwrap().iter().position(|h| h == "pass").unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 150);
    assert!(rows.iter().all(|r| &r[pass_col] == "true"));
}

#[test]
fn train_eval_probe_export_round_trip() {
    let dir = tiny_dir();
    let p = dir.path();
    let out = cresp(&["train", "-c", "tiny.toml"], p);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = p.join("out/cresp_t_s1");
    for f in ["config.toml", "manifest.toml", "metrics.csv", "checkpoint/encoder.ckpt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let ckpt = "out/cresp_t_s1/checkpoint";
    let eval = cresp(&["eval", "-c", "tiny.toml", "--checkpoint", ckpt], p);
    assert_eq!(eval.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&eval.stdout).contains("test return"));

    let probe = cresp(&["probe", "-c", "tiny.toml", "--checkpoint", ckpt], p);
    assert_eq!(
        probe.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&probe.stderr)
    );
    let probe_csv = std::fs::read_to_string(run.join("probe.csv")).unwrap();
    assert!(probe_csv.starts_with("objective,seed,probe_seed,env_label_ce,latent_loss"));

    let export = cresp(
        &[
            "export-repr",
            "-c",
            "tiny.toml",
            "--checkpoint",
            ckpt,
            "--n",
            "30",
            "--out",
            "z.csv",
        ],
        p,
    );
    assert_eq!(export.status.code(), Some(0));
    let z = std::fs::read_to_string(p.join("z.csv")).unwrap();
    assert_eq!(z.lines().count(), 31);
    assert!(z.lines().next().unwrap().ends_with("latent0,latent1,env_id"));

    // A missing checkpoint is a runtime failure, not a config error.
    assert_eq!(
        cresp(&["eval", "-c", "tiny.toml", "--checkpoint", "nowhere"], p)
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tiny_dir();
    let p = dir.path();
    for out in ["a", "b"] {
        let o = cresp(&["train", "-c", "tiny.toml", "--out-dir", out, "--objective", "tdp"], p);
        assert_eq!(o.status.code(), Some(0));
    }
    let a = std::fs::read(p.join("a/tdp_s1/metrics.csv")).unwrap();
    let b = std::fs::read(p.join("b/tdp_s1/metrics.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sweep_runs_the_cross_product() {
    let dir = tiny_dir();
    let p = dir.path();
    let cfg = format!("{TINY}\n[sweep]\nobjectives = [\"cresp\", \"tdp\", \"none\"]\n")
        .replace("seeds = [1]", "seeds = [1, 2]");
    std::fs::write(p.join("sweep.toml"), cfg).unwrap();
    let out = cresp(&["sweep", "-c", "sweep.toml"], p);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(p.join("out/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 7);
    for name in ["cresp_T5_s1", "tdp_T5_s2", "none_T1_s1"] {
        assert!(p.join("out").join(name).join("metrics.csv").exists(), "missing {name}");
    }
}
