use std::fs;
use std::path::Path;
use std::process::Command;

use lrtuner::cli::commands::{cmd_sb_scan, cmd_sweep, cmd_train, TrainSummary};
use lrtuner::cli::RunConfig;
use lrtuner::schedules::{lr_at, ScheduleSpec};

const BIN: &str = env!("CARGO_BIN_EXE_lrtuner");

fn moons(policy: &str, seeds: &str) -> String {
    format!(
        r#"{{"dataset":{{"kind":"two_moons","n":400}},"model":{{"kind":"mlp","hidden":[16]}},
            "optimizer":{{"kind":"momentum","momentum":0.9}},"batch_size":16,
            "lr_policy":{policy},"epochs":4,"seeds":{seeds}}}"#
    )
}

const TUNER: &str = r#"{"tuner":{"seed_lr":0.1,"recompute_window":10,"superbatch_size":5}}"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p
}

fn read_trace(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    assert_eq!(
        r.headers().unwrap(),
        vec!["step", "epoch", "lr", "train_loss", "superbatch_loss", "test_loss", "test_acc", "probe_fwd", "event"]
    );
    r.records().map(|x| x.unwrap()).collect()
}

#[test]
fn train_exit_zero_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &moons(TUNER, "[1, 2]"));
    let out = dir.path().join("out");
    let status = Command::new(BIN)
        .args(["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "7", "--quiet"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(out.join("trace_seed7.csv").exists());
    assert!(!out.join("trace_seed1.csv").exists());
    let summary: TrainSummary = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.runs.len(), 1);
}

#[test]
fn malformed_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "{\"dataset\": {\"kind\": \"two_moons\"\n");
    let out = Command::new(BIN).args(["train", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));
}

#[test]
fn unsupported_sweep_field_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &moons(TUNER, "[1]"));
    let out = Command::new(BIN)
        .args(["sweep", "--config", cfg.to_str().unwrap(), "--field", "momentum", "--values", "0.1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_dataset_files_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{"dataset":{"kind":"idx","train_images":"/nonexistent/a","train_labels":"/nonexistent/b",
        "test_images":"/nonexistent/c","test_labels":"/nonexistent/d"},
        "model":{"kind":"logistic_regression"},"optimizer":{"kind":"sgd"},"batch_size":8,
        "lr_policy":{"schedule":{"kind":"constant","lr":0.1}},"epochs":1}"#;
    let cfg = write_config(dir.path(), text);
    let out = Command::new(BIN)
        .args(["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn range_test_prints_suggestion() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{"dataset":{"kind":"quadratic_bowl","diag":[1,10],"init":[1,1],"examples":256,"noise":0.1},
        "optimizer":{"kind":"sgd"},"batch_size":1,"lr_policy":{"schedule":{"kind":"constant","lr":0.1}},"epochs":1}"#;
    let cfg = write_config(dir.path(), text);
    let out_dir = dir.path().join("rt");
    let out = Command::new(BIN)
        .args(["range-test", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()])
        .args(["--lr-min", "1e-3", "--lr-max", "1", "--steps", "300", "--quiet"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lr: f64 = stdout.trim().strip_prefix("suggested_max_lr ").unwrap().parse().unwrap();
    assert!(lr > 0.0 && lr < 0.1, "{lr}");
    assert!(fs::read_to_string(out_dir.join("range_test.csv")).unwrap().starts_with("lr,loss,smoothed_loss\n"));
}

#[test]
fn schedule_trace_replays_lr_at() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ScheduleSpec::one_cycle(0.2);
    let policy = format!(r#"{{"schedule":{}}}"#, serde_json::to_string(&spec).unwrap());
    let cfg = RunConfig::from_json(&moons(&policy, "[3]")).unwrap();
    let summary = cmd_train(&cfg, dir.path()).unwrap();
    let rows = read_trace(&dir.path().join("trace_seed3.csv"));
    let total = summary.runs[0].steps;
    assert_eq!(rows.len() as u64, total);
    for r in &rows {
        let step: u64 = r[0].parse().unwrap();
        let lr: f64 = r[2].parse().unwrap();
        assert!((lr - lr_at(&spec, step, total).unwrap()).abs() <= 1e-12);
        assert_eq!(&r[8], "none");
        assert!(r[4].is_empty());
    }
}

#[test]
fn tuner_trace_matches_counters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_json(&moons(TUNER, "[1, 2, 3]")).unwrap();
    let summary = cmd_train(&cfg, dir.path()).unwrap();
    assert_eq!(summary.aggregate["final_test_acc"].n, 3);
    assert!(summary.aggregate["final_test_acc"].stddev >= 0.0);
    for run in &summary.runs {
        let rows = read_trace(&dir.path().join(format!("trace_seed{}.csv", run.seed)));
        let mut prev = None;
        let count = |tag: &str| rows.iter().filter(|r| &r[8] == tag).count() as u64;
        for r in &rows {
            let step: u64 = r[0].parse().unwrap();
            assert!(prev.map_or(true, |p| step > p));
            prev = Some(step);
            if step % 10 == 0 {
                assert_ne!(&r[8], "none", "step {step}");
                assert!(!r[4].is_empty());
            }
        }
        let c = run.tuner.unwrap();
        assert_eq!(count("recompute_accept"), c.accepts);
        assert_eq!(count("recompute_reject_phase"), c.rejects_phase);
        assert_eq!(count("recompute_reject_saturation"), c.rejects_saturation);
        assert_eq!(count("recompute_reject_invalid"), c.rejects_invalid);
        assert_eq!(count("rollback"), c.rollbacks);
        assert_eq!(c.accepts + c.rejects_phase + c.rejects_invalid, c.recomputes);
        // 80 steps, explore ends at step 20, a recompute boundary whose tag takes priority
        assert_eq!(count("phase_switch"), 0);
        let last: u64 = rows.last().unwrap()[7].parse().unwrap();
        assert_eq!(last, c.probe_forward_passes);
    }
}

#[test]
fn single_value_sweep_equals_train() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_json(&moons(TUNER, "[1, 2]")).unwrap();
    let rows = cmd_sweep(&cfg, &[0.1], &dir.path().join("s")).unwrap();
    let train = cmd_train(&cfg, &dir.path().join("t")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].mean, train.aggregate["final_test_acc"].mean);
    assert_eq!(rows[0].stddev, train.aggregate["final_test_acc"].stddev);
    let csv = fs::read_to_string(dir.path().join("s/sweep.csv")).unwrap();
    assert!(csv.starts_with("value,mean,stddev\n"));
    assert!(cmd_sweep(&cfg, &[0.1, -1.0], &dir.path().join("x")).is_err());
}

#[test]
fn sb_scan_full_epoch_has_zero_spread() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_json(&moons(TUNER, "[1]")).unwrap();
    // 320 training rows / 16 = 20 minibatches
    let rows = cmd_sb_scan(&cfg, &[1, 20], 5, dir.path()).unwrap();
    assert!(rows[0].1 > 0.0);
    assert!(rows[1].1.abs() < 1e-12, "{}", rows[1].1);
    let err = cmd_sb_scan(&cfg, &[21], 5, dir.path()).unwrap_err();
    assert!(err.is_config_error());
}
