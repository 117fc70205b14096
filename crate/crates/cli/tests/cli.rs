use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn diffpo(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffpo"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("DIFFPO_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> serde_json::Value {
    let o = diffpo(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    serde_json::from_slice(&o.stdout).expect("JSON summary on stdout")
}

fn failure(out: &Path, args: &[&str]) -> serde_json::Value {
    let o = diffpo(out, args);
    assert!(!o.status.success(), "{args:?} unexpectedly succeeded");
    assert_eq!(o.status.code(), Some(1));
    let line = String::from_utf8_lossy(&o.stderr);
    let last = line.lines().last().expect("error line on stderr");
    serde_json::from_str(last).expect("machine-readable error")
}

fn data_rows(path: &Path) -> usize {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .count()
        - 1
}

fn first_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn smoke_pipeline_is_deterministic() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        for stage in ["generate", "train", "sample", "evaluate", "baselines"] {
            ok(d.path(), &[stage, "--smoke", "--seed", "3"]);
        }
    }
    let (a, b) = (dirs[0].path(), dirs[1].path());
    for file in [
        "train.csv",
        "test.csv",
        "oracle.csv",
        "loss.csv",
        "samples.csv",
        "eval_report.json",
        "eval_units.csv",
        "baselines.json",
        "model/denoiser.ckpt",
    ] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    assert!(!a.join(".diffpo.lock").exists());
    assert_eq!(data_rows(&a.join("train.csv")), 400);
    assert_eq!(data_rows(&a.join("test.csv")), 100);
    assert_eq!(data_rows(&a.join("samples.csv")), 100 * 2 * 50);

    let stamp = first_line(&a.join("train.csv"));
    assert!(
        stamp.starts_with("# config_hash=") && stamp.ends_with(" seed=3"),
        "{stamp}"
    );
    for file in [
        "test.csv",
        "oracle.csv",
        "loss.csv",
        "samples.csv",
        "eval_units.csv",
        "config.toml",
    ] {
        assert_eq!(first_line(&a.join(file)), stamp, "{file}");
    }

    let report: serde_json::Value = serde_json::from_slice(&fs::read(a.join("eval_report.json")).unwrap()).unwrap();
    for split in ["in_sample", "out_of_sample"] {
        assert!(report[split]["pehe"].as_f64().unwrap() >= 0.0);
        for arm in 0..2 {
            let m = &report[split]["arms"][arm];
            for key in ["w1", "rmse", "coverage95", "coverage99"] {
                assert!(m[key].as_f64().is_some(), "{split} arm {arm} {key}");
            }
        }
    }
    let hash = report["meta"]["config_hash"].as_str().unwrap();
    assert!(stamp.contains(hash));

    // Re-evaluating the same checkpoint reproduces the report.
    let before = fs::read(a.join("eval_report.json")).unwrap();
    ok(a, &["evaluate", "--smoke", "--seed", "3"]);
    assert_eq!(before, fs::read(a.join("eval_report.json")).unwrap());
}

#[test]
fn default_generate_splits_four_to_one() {
    let d = tempfile::tempdir().unwrap();
    let summary = ok(d.path(), &["generate", "--seed", "1"]);
    assert_eq!(summary["summary"]["train_rows"], 4000);
    assert_eq!(data_rows(&d.path().join("train.csv")), 4000);
    assert_eq!(data_rows(&d.path().join("test.csv")), 1000);
    assert_eq!(data_rows(&d.path().join("oracle.csv")), 5000);
}

#[test]
fn stamp_follows_config_changes() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["generate", "--smoke", "--seed", "1"]);
    let a = first_line(&d.path().join("train.csv"));
    ok(
        d.path(),
        &["generate", "--smoke", "--seed", "1", "--loss", "unweighted"],
    );
    let b = first_line(&d.path().join("train.csv"));
    ok(d.path(), &["generate", "--smoke", "--seed", "1"]);
    let c = first_line(&d.path().join("train.csv"));
    assert_ne!(a, b);
    assert_eq!(a, c);
}

#[test]
fn missing_dataset_is_file_not_found() {
    let d = tempfile::tempdir().unwrap();
    let err = failure(d.path(), &["train", "--smoke"]);
    assert_eq!(err["error"], "io");
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("train.csv") && msg.contains("not found"), "{msg}");
}

#[test]
fn missing_config_file_is_reported() {
    let d = tempfile::tempdir().unwrap();
    let err = failure(d.path(), &["generate", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(err["error"], "io");
    assert!(err["message"].as_str().unwrap().contains("/nonexistent/cfg.toml"));
}

#[test]
fn loss_flag_routes_to_training() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["generate", "--smoke"]);
    ok(d.path(), &["train", "--smoke", "--loss", "unweighted"]);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(d.path().join("train_report.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["loss"], "unweighted");
    ok(d.path(), &["train", "--smoke"]);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(d.path().join("train_report.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["loss"], "orthogonal");
}

#[test]
fn schedule_mismatch_and_corruption_are_rejected() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["generate", "--smoke"]);
    ok(d.path(), &["train", "--smoke"]);
    // Without --smoke the configuration asks for T = 100.
    let err = failure(d.path(), &["evaluate"]);
    assert_eq!(err["error"], "configuration");
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("T=25") && msg.contains("T=100"), "{msg}");

    let ckpt = d.path().join("model/denoiser.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[20] ^= 0xFF;
    fs::write(&ckpt, bytes).unwrap();
    let err = failure(d.path(), &["evaluate", "--smoke"]);
    assert_eq!(err["error"], "integrity");
}

#[test]
fn locked_output_is_refused() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join(".diffpo.lock"), "1\n").unwrap();
    let o = diffpo(d.path(), &["generate", "--smoke"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("locked"));
}

#[test]
fn orthogonality_table_round_trips() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("cfg.toml");
    fs::write(
        &cfg,
        "seed = 5\n\
         [train]\nepochs = 2\n\
         [train.schedule]\nsteps = 10\n\
         [train.denoiser]\nhidden = 16\nembedding_dim = 16\nn_blocks = 1\n\
         [train.propensity]\nmax_epochs = 5\n\
         [orthogonality]\nsizes = [500, 1000, 2000]\nseeds = [0, 1, 2]\ntest_units = 100\nm = 10\n",
    )
    .unwrap();
    let out = d.path().join("run");
    let summary = ok(
        &out,
        &[
            "simulate-orthogonality",
            "--config",
            cfg.to_str().unwrap(),
            "--perturb-propensity",
            "uniform",
        ],
    );
    assert_eq!(summary["summary"]["rows"], 9);
    let text = fs::read_to_string(out.join("orthogonality.csv")).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(lines.next(), Some("n,seed,pehe"));
    let rows: Vec<(usize, u64, f64)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r.2.is_finite() && r.2 >= 0.0));
}
