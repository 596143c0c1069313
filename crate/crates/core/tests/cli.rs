use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use sacstab::cli::{
    cmd_compare, cmd_eval, cmd_train, cmd_verify, CompareArgs, ConfigArgs, EvalArgs, TrainArgs, VerifyArgs,
};
use sacstab::nn::{GaussianPolicy, Mlp};

fn linear_args(out: &Path) -> TrainArgs {
    TrainArgs {
        config: ConfigArgs {
            env: Some("linear".into()),
            seed: Some(3),
            set: vec![
                "train.total_steps=4000".into(),
                "train.threshold_a=200".into(),
                "train.threshold_b=200".into(),
                "train.batch_size=64".into(),
            ],
            ..ConfigArgs::default()
        },
        out: Some(out.to_path_buf()),
        force: false,
    }
}

/// One trained linear-plant run shared by the tests below.
fn linear_run() -> &'static Path {
    static RUN: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    let (_, dir) = RUN.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let dir = cmd_train(&linear_args(&root.path().join("lin"))).unwrap();
        (root, dir)
    });
    dir
}

#[test]
fn train_writes_artifact_contract() {
    let dir = linear_run();
    for f in ["config.resolved", "policy.json", "train_log.csv", "sysid_report.csv", "gain.json", "train_meta.json"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let log = fs::read_to_string(dir.join("train_log.csv")).unwrap();
    assert!(log.starts_with("env_step,episode_return,"));
    let resolved = fs::read_to_string(dir.join("config.resolved")).unwrap();
    assert!(resolved.contains("total_steps = 4000"));
    assert!(resolved.contains("name = \"linear\""));
}

#[test]
fn rerun_refuses_without_force() {
    let dir = linear_run();
    let err = cmd_train(&linear_args(dir)).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("--force"));
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = linear_run();
    let root = tempfile::tempdir().unwrap();
    let again = cmd_train(&TrainArgs {
        config: ConfigArgs {
            config: Some(dir.join("config.resolved")),
            ..ConfigArgs::default()
        },
        out: Some(root.path().join("again")),
        force: false,
    })
    .unwrap();
    for f in ["train_log.csv", "policy.json"] {
        assert_eq!(fs::read(dir.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_from_origin_stays_at_origin() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("eval0");
    cmd_eval(&EvalArgs {
        policy: linear_run().to_path_buf(),
        out: out.clone(),
        start: Some("0".into()),
        horizon: Some(50),
        ..EvalArgs::default()
    })
    .unwrap();
    let text = fs::read_to_string(out.join("traj_000.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap().split(',').nth(1), Some("x_1"));
    let mut rows = 0;
    for line in lines {
        let x: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(x, 0.0);
        rows += 1;
    }
    assert_eq!(rows, 51);
}

#[test]
fn eval_is_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = root.path().join(name);
        cmd_eval(&EvalArgs {
            policy: linear_run().to_path_buf(),
            config: ConfigArgs {
                seed: Some(7),
                ..ConfigArgs::default()
            },
            out: out.clone(),
            n_starts: Some(50),
            horizon: Some(100),
            ..EvalArgs::default()
        })
        .unwrap();
        fs::read(out.join("cost_curve.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
    assert_eq!(fs::read_dir(root.path().join("a")).unwrap().count(), 52);
}

#[test]
fn eval_rejects_dimension_mismatch() {
    let root = tempfile::tempdir().unwrap();
    let err = cmd_eval(&EvalArgs {
        policy: linear_run().join("policy.json"),
        config: ConfigArgs {
            env: Some("pendulum".into()),
            ..ConfigArgs::default()
        },
        out: root.path().join("x"),
        ..EvalArgs::default()
    })
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let msg = err.to_string();
    assert!(msg.contains("state dim 2") && msg.contains("state dim 1"), "{msg}");
}

#[test]
fn verify_trained_linear_policy_certifies() {
    let root = tempfile::tempdir().unwrap();
    let report = cmd_verify(&VerifyArgs {
        policy: linear_run().to_path_buf(),
        out: root.path().to_path_buf(),
        ..VerifyArgs::default()
    })
    .unwrap();
    let roa = report.roa.as_ref().expect("Schur stable");
    assert!(roa.certified_by_sampling && roa.violations == 0);
    let text = fs::read_to_string(root.path().join("roa_report.json")).unwrap();
    let back: sacstab::eval::VerifyReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, report);
}

#[test]
fn verify_zero_policy_on_pendulum_is_unstable() {
    let root = tempfile::tempdir().unwrap();
    let net = Mlp::zeros(&[2, 16, 16, 2]).unwrap();
    let policy = GaussianPolicy::new(net, vec![6.0], vec![0.0]).unwrap();
    let path = root.path().join("zero.json");
    fs::write(&path, policy.to_json()).unwrap();
    let report = cmd_verify(&VerifyArgs {
        policy: path,
        config: ConfigArgs {
            env: Some("pendulum".into()),
            ..ConfigArgs::default()
        },
        out: root.path().join("v"),
        force: false,
    })
    .unwrap();
    assert!(!report.schur_stable);
    assert!(report.roa.is_none());
}

#[test]
fn compare_same_run_twice_and_empty_list() {
    let root = tempfile::tempdir().unwrap();
    let rows = cmd_compare(&CompareArgs {
        runs: vec![linear_run().to_path_buf(), linear_run().to_path_buf()],
        out: root.path().join("cmp"),
        n_starts: Some(10),
        horizon: Some(100),
        ..CompareArgs::default()
    })
    .unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], rows[1]);
    let summary = fs::read_to_string(root.path().join("cmp/summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[1], lines[2]);

    let err = cmd_compare(&CompareArgs {
        out: root.path().join("none"),
        ..CompareArgs::default()
    })
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_sacstab");
    let root = tempfile::tempdir().unwrap();
    let missing = Command::new(bin).args(["train", "--out"]).arg(root.path().join("r")).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("env.name"));

    let ok = Command::new(bin)
        .args(["sysid-test", "--env", "linear", "--out"])
        .arg(root.path().join("s"))
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(root.path().join("s/sysid_report.csv").exists());

    let bad_policy = root.path().join("bad.json");
    fs::write(&bad_policy, "{}").unwrap();
    let load = Command::new(bin)
        .args(["verify", "--env", "linear", "--policy"])
        .arg(&bad_policy)
        .arg("--out")
        .arg(root.path().join("v"))
        .output()
        .unwrap();
    assert_eq!(load.status.code(), Some(2));
}
