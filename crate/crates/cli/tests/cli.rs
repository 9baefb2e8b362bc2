use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_ddm");

fn ddm(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn ddm")
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// Small, fast training config.
fn config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("cfg.json");
    let text = format!(
        r#"{{"iters": 100, "log_every": 10, "hidden_width": 16, "depth": 2, "time_embed_dim": 4,
            "batch_size": 32, "head_variant": "shared_trunk_linear_heads",
            "dataset": {{"name": "two_moons", "n": 400}}{extra}}}"#
    );
    fs::write(&path, text).unwrap();
    path
}

fn trained(dir: &Path) -> PathBuf {
    let cfg = config(dir, "");
    let out = dir.join("run");
    let o = ddm(&["train", "--config", &s(&cfg), "--out", &s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("checkpoint.ddmc")
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(String::from)
        .collect()
}

#[test]
fn train_writes_checkpoint_and_metrics() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(dir.path());
    assert!(ckpt.exists());
    let m = lines(&dir.path().join("run/metrics.csv"));
    assert_eq!(m[0], "iter,loss,loss_phi,loss_eps,lr");
    assert_eq!(m.len() - 1, 100 / 10);
    assert!(m[1].starts_with("10,"));
}

#[test]
fn train_is_reproducible() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    assert!(fs::read(trained(a.path())).unwrap() == fs::read(trained(b.path())).unwrap());
}

#[test]
fn global_seed_overrides_config_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "");
    let run = |seed: &str, out: &str| {
        let out = dir.path().join(out);
        assert!(ddm(&[
            "--seed",
            seed,
            "train",
            "--config",
            &s(&cfg),
            "--out",
            &s(&out)
        ])
        .status
        .success());
        fs::read(out.join("checkpoint.ddmc")).unwrap()
    };
    assert_ne!(run("1", "a"), run("2", "b"));
    assert_eq!(run("0", "c"), fs::read(trained(dir.path())).unwrap());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let full = trained(dir.path());
    let cfg = config(dir.path(), "");
    let half = dir.path().join("half");
    assert!(ddm(&[
        "train",
        "--config",
        &s(&cfg),
        "--until",
        "60",
        "--out",
        &s(&half)
    ])
    .status
    .success());
    assert_eq!(lines(&half.join("metrics.csv")).len() - 1, 6);
    let rest = dir.path().join("rest");
    let o = ddm(&[
        "train",
        "--config",
        &s(&cfg),
        "--resume",
        &s(&half.join("checkpoint.ddmc")),
        "--out",
        &s(&rest),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read(rest.join("checkpoint.ddmc")).unwrap() == fs::read(full).unwrap());
    assert_eq!(lines(&rest.join("metrics.csv")).len() - 1, 4);

    let other = config(dir.path(), r#", "lr0": 0.5"#);
    let o = ddm(&[
        "train",
        "--config",
        &s(&other),
        "--resume",
        &s(&half.join("checkpoint.ddmc")),
        "--out",
        &s(&rest),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_config_exits_2() {
    let dir = TempDir::new().unwrap();
    for bad in [
        r#"{"iters": 10, "unknown_key": 1}"#,
        "{not json",
        r#"{"batch_size": 0}"#,
    ] {
        let path = dir.path().join("bad.json");
        fs::write(&path, bad).unwrap();
        let o = ddm(&["train", "--config", &s(&path), "--out", &s(dir.path())]);
        assert_eq!(o.status.code(), Some(2), "{bad}");
        assert!(!o.stderr.is_empty());
    }
    let o = ddm(&["train", "--config", &s(&dir.path().join("absent.json"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn diverging_run_exits_3() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), r#", "lr0": 1e300, "lr_min": 0"#);
    let o = ddm(&["train", "--config", &s(&cfg), "--out", &s(dir.path())]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn sample_writes_requested_rows() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(dir.path());
    let out = dir.path().join("s");
    let o = ddm(&[
        "sample",
        "--checkpoint",
        &s(&ckpt),
        "--nfe",
        "10",
        "--n-samples",
        "1000",
        "--out",
        &s(&out),
    ]);
    assert!(o.status.success());
    let samples = lines(&out.join("samples.csv"));
    assert_eq!(samples[0], "d0,d1");
    assert_eq!(samples.len() - 1, 1000);
    assert!(samples[1..].iter().all(|l| l.split(',').count() == 2));
    let traj = lines(&out.join("trajectory.csv"));
    assert_eq!(traj[0], "t,mse");
    assert_eq!(traj.len() - 1, 10);
}

#[test]
fn sample_is_seeded() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(dir.path());
    let run = |seed: &str, out: &str, extra: &[&str]| {
        let out = dir.path().join(out);
        let mut args = vec![
            "--seed",
            seed,
            "sample",
            "--checkpoint",
            &ckpt.to_str().unwrap(),
            "--nfe",
            "4",
        ];
        args.extend_from_slice(&["--n-samples", "300"]);
        args.extend_from_slice(extra);
        let out_s = s(&out);
        args.extend_from_slice(&["--out", &out_s]);
        assert!(ddm(&args).status.success());
        fs::read(out.join("samples.csv")).unwrap()
    };
    assert_eq!(run("7", "a", &[]), run("7", "b", &[]));
    assert_ne!(run("7", "c", &[]), run("8", "d", &[]));
    assert_ne!(run("7", "e", &[]), run("7", "f", &["--no-ema"]));
}

#[test]
fn sample_rejects_zero_nfe_and_missing_checkpoint() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(dir.path());
    assert_eq!(
        ddm(&["sample", "--checkpoint", &s(&ckpt), "--nfe", "0"])
            .status
            .code(),
        Some(2)
    );
    let missing = dir.path().join("nope.ddmc");
    assert_eq!(
        ddm(&["sample", "--checkpoint", &s(&missing)]).status.code(),
        Some(2)
    );
    let junk = dir.path().join("junk.ddmc");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(
        ddm(&["sample", "--checkpoint", &s(&junk)]).status.code(),
        Some(2)
    );
}

#[test]
fn oracle_sampling_bypasses_checkpoint() {
    let dir = TempDir::new().unwrap();
    let gmm = dir.path().join("gmm.json");
    fs::write(
        &gmm,
        r#"{"weights": [1.0], "means": [[2.0, -1.0]], "variances": [[0.05, 0.05]]}"#,
    )
    .unwrap();
    let out = dir.path().join("o");
    let o = ddm(&[
        "sample",
        "--oracle",
        &s(&gmm),
        "--nfe",
        "20",
        "--n-samples",
        "2000",
        "--out",
        &s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = lines(&out.join("samples.csv"));
    let n = (rows.len() - 1) as f64;
    let mean_x: f64 = rows[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap().parse::<f64>().unwrap())
        .sum::<f64>()
        / n;
    assert!((mean_x - 2.0).abs() < 0.05, "{mean_x}");

    let default = dir.path().join("d");
    assert!(ddm(&[
        "oracle-sample",
        "--nfe",
        "5",
        "--n-samples",
        "100",
        "--out",
        &s(&default)
    ])
    .status
    .success());
    assert_eq!(lines(&default.join("samples.csv")).len(), 101);
}

#[test]
fn eval_emits_one_row_per_nfe_and_model() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(dir.path());
    let out = dir.path().join("e");
    let c = s(&ckpt);
    let o = ddm(&[
        "eval",
        "--checkpoint",
        &c,
        "--checkpoint",
        &c,
        "--nfe-list",
        "5,10,20,50",
        "--n-samples",
        "300",
        "--out",
        &s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = lines(&out.join("sweep.csv"));
    assert_eq!(rows[0], "nfe,metric_name,value");
    assert_eq!(rows.len() - 1, 8);
    assert_eq!(
        rows.iter()
            .filter(|r| r.contains(",swd:ddm-constant,"))
            .count(),
        4
    );
    assert_eq!(
        rows.iter()
            .filter(|r| r.contains(",swd:ddm-constant#2,"))
            .count(),
        4
    );
    let again = dir.path().join("e2");
    ddm(&[
        "eval",
        "--checkpoint",
        &c,
        "--checkpoint",
        &c,
        "--nfe-list",
        "5,10,20,50",
        "--n-samples",
        "300",
        "--out",
        &s(&again),
    ]);
    assert_eq!(
        fs::read(out.join("sweep.csv")).unwrap(),
        fs::read(again.join("sweep.csv")).unwrap()
    );

    let missing = s(&dir.path().join("missing.ddmc"));
    assert_eq!(
        ddm(&["eval", "--checkpoint", &missing]).status.code(),
        Some(2)
    );
}

#[test]
fn sweep_trains_each_family() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "");
    let out = dir.path().join("sw");
    let o = ddm(&[
        "sweep",
        "--config",
        &s(&cfg),
        "--ht-list",
        "constant,linear",
        "--nfe-list",
        "3,6",
        "--n-samples",
        "300",
        "--out",
        &s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = lines(&out.join("sweep.csv"));
    assert_eq!(rows.len() - 1, 4);
    assert!(rows[1].starts_with("3,swd:ddm-constant,"));
    assert!(rows[3].starts_with("3,swd:ddm-linear,"));
    assert!(out.join("checkpoint-linear.ddmc").exists());
    let bad = ddm(&[
        "sweep",
        "--config",
        &s(&cfg),
        "--ht-list",
        "cubic",
        "--out",
        &s(&out),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_every_tensor_once() {
    let o = ddm(&["gradcheck", "--hidden-width", "16", "--depth", "2"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let out = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = out
        .lines()
        .skip(1)
        .filter(|l| l.matches(',').count() == 3)
        .collect();
    let keys: Vec<(&str, &str)> = rows
        .iter()
        .map(|l| {
            let mut it = l.split(',');
            (it.next().unwrap(), it.next().unwrap())
        })
        .collect();
    let mut unique = keys.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), keys.len());
    assert!(keys.contains(&("ddm/deep_heads/adaptive/l1_plus_l2", "head1.2.bias")));
}

#[test]
fn corrupted_gradient_fails_gradcheck() {
    let o = ddm(&[
        "gradcheck",
        "--hidden-width",
        "16",
        "--depth",
        "2",
        "--corrupt",
        "head0.0.weight",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("head0.0.weight"), "{err}");
    assert!(!err.contains("trunk."), "{err}");
}

#[test]
fn invalid_thread_count_exits_2() {
    let o = Command::new(BIN)
        .args(["oracle-sample", "--n-samples", "10"])
        .env("DDM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
