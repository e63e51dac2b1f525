use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use lrtuner_ffi::*;

fn last_error() -> String {
    let p = lrt_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn fit_and_propose() {
    let eps = [-0.1, 0.0, 0.1];
    let losses: Vec<f64> = eps.iter().map(|e| 1.0 - 0.1 * e + 5.0 * e * e).collect();
    let mut fit = LrtQuadFit { k0: 0.0, k1: 0.0, k2: 0.0, residual_rms: 0.0 };
    let st = unsafe { lrt_fit_quadratic(eps.as_ptr(), losses.as_ptr(), 3, &mut fit) };
    assert_eq!(st, LrtStatus::Ok);
    assert!((fit.k1 + 0.1).abs() < 1e-12 && (fit.k2 - 5.0).abs() < 1e-12);

    let mut bound = 0.0;
    assert_eq!(unsafe { lrt_epsilon_bound(1e-3, 1.0, &mut bound) }, LrtStatus::Ok);
    assert_eq!(bound, 0.1);

    let mut p = LrtProposal { kind: LrtProposalKind::RejectNoMinimum, epsilon: 0.0 };
    assert_eq!(unsafe { lrt_propose_epsilon(&fit, bound, &mut p) }, LrtStatus::Ok);
    assert_eq!(p.kind, LrtProposalKind::Accept);
    assert!((p.epsilon - 0.01).abs() < 1e-12);
}

#[test]
fn error_codes() {
    let eps = [0.1, 0.1, 0.1];
    let mut fit = LrtQuadFit { k0: 0.0, k1: 0.0, k2: 0.0, residual_rms: 0.0 };
    let st = unsafe { lrt_fit_quadratic(eps.as_ptr(), eps.as_ptr(), 3, &mut fit) };
    assert_eq!(st, LrtStatus::DegenerateDesign);
    assert!(last_error().contains("distinct"));

    let nan = [f64::NAN, 1.0, 2.0];
    let xs = [0.0, 0.1, 0.2];
    assert_eq!(unsafe { lrt_fit_quadratic(xs.as_ptr(), nan.as_ptr(), 3, &mut fit) }, LrtStatus::InvalidSample);

    let mut out = 0.0;
    assert_eq!(unsafe { lrt_epsilon_bound(-1.0, 1.0, &mut out) }, LrtStatus::InvalidArgument);
    assert_eq!(unsafe { lrt_epsilon_bound(1.0, 1.0, ptr::null_mut()) }, LrtStatus::NullPointer);
    assert!(last_error().contains("out"));

    let mut grid = [0.0; 2];
    assert_eq!(unsafe { lrt_probe_points(0.1, 0.1, 2, 0.5, grid.as_mut_ptr()) }, LrtStatus::InvalidArgument);
}

#[test]
fn probe_points_symmetric() {
    let mut grid = [0.0; 5];
    assert_eq!(unsafe { lrt_probe_points(0.1, 0.1, 5, 0.5, grid.as_mut_ptr()) }, LrtStatus::Ok);
    assert_eq!(grid[2], 0.0);
    assert!((grid[0] + grid[4]).abs() < 1e-15);
}

#[test]
fn schedule_handle() {
    let json = CString::new(r#"{"kind":"cosine_decay","seed_lr":0.1}"#).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { lrt_schedule_new(json.as_ptr(), 1000, &mut h) }, LrtStatus::Ok);
    let mut lr = 0.0;
    assert_eq!(unsafe { lrt_schedule_lr_at(h, 500, &mut lr) }, LrtStatus::Ok);
    assert!((lr - 0.05).abs() < 1e-15);
    assert_eq!(unsafe { lrt_schedule_lr_at(h, 1000, &mut lr) }, LrtStatus::InvalidArgument);
    unsafe { lrt_schedule_free(h) };
    unsafe { lrt_schedule_free(ptr::null_mut()) };

    let bad = CString::new(r#"{"kind":"cosine"}"#).unwrap();
    assert_eq!(unsafe { lrt_schedule_new(bad.as_ptr(), 10, &mut h) }, LrtStatus::Parse);
}

#[test]
fn controller_drives_lr_toward_fitted_minimum() {
    let json = CString::new(r#"{"total_steps":100,"explore":{"steps":50},"seed_lr":0.1}"#).unwrap();
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { lrt_controller_new(json.as_ptr(), &mut c) }, LrtStatus::Ok);
    assert_eq!(unsafe { lrt_controller_lr(c) }, 0.1);

    let mut phase = LrtPhase::Exploit;
    assert_eq!(unsafe { lrt_controller_phase(c, 0, &mut phase) }, LrtStatus::Ok);
    assert_eq!(phase, LrtPhase::Explore);

    // loss along the step direction with its minimum at lr = 0.12
    let loss = |lr: f64| 1.0 + 10.0 * (lr - 0.12) * (lr - 0.12);
    let l0 = loss(0.1);
    let mut grid = [0.0; 8];
    let mut n = 0;
    assert_eq!(unsafe { lrt_controller_probe_grid(c, l0, grid.as_mut_ptr(), grid.len(), &mut n) }, LrtStatus::Ok);
    assert_eq!(n, 5);
    let losses: Vec<f64> = grid[..n].iter().map(|e| loss(0.1 + e)).collect();
    let mut ev = LrtEvent::Rollback;
    let st = unsafe { lrt_controller_decide(c, 0, grid.as_ptr(), losses.as_ptr(), n, l0, &mut ev) };
    assert_eq!(st, LrtStatus::Ok);
    assert_eq!(ev, LrtEvent::RecomputeAccept);
    assert!((unsafe { lrt_controller_lr(c) } - 0.12).abs() < 1e-12);

    let mut sat = true;
    assert_eq!(unsafe { lrt_controller_observe_rate(c, 1.0) }, LrtStatus::Ok);
    assert_eq!(unsafe { lrt_controller_saturation_gate(c, 0.5, &mut sat) }, LrtStatus::Ok);
    assert!(!sat);
    assert_eq!(unsafe { lrt_controller_saturation_gate(c, 0.001, &mut sat) }, LrtStatus::Ok);
    assert!(sat);
    unsafe { lrt_controller_free(c) };
    assert!(unsafe { lrt_controller_lr(ptr::null()) }.is_nan());
}

#[test]
fn controller_rejects_bad_config() {
    let json = CString::new(r#"{"total_steps":10,"n_probes":2}"#).unwrap();
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { lrt_controller_new(json.as_ptr(), &mut c) }, LrtStatus::InvalidArgument);
    assert!(c.is_null());
    let json = CString::new("{").unwrap();
    assert_eq!(unsafe { lrt_controller_new(json.as_ptr(), &mut c) }, LrtStatus::Parse);
}

fn header() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/lrtuner.h")
}

#[test]
fn header_declares_api() {
    let text = std::fs::read_to_string(header()).unwrap();
    for name in [
        "lrt_fit_quadratic",
        "lrt_epsilon_bound",
        "lrt_propose_epsilon",
        "lrt_probe_points",
        "lrt_schedule_new",
        "lrt_schedule_lr_at",
        "lrt_schedule_free",
        "lrt_controller_new",
        "lrt_controller_decide",
        "lrt_controller_free",
        "lrt_last_error",
        "typedef struct LrtController LrtController;",
    ] {
        assert!(text.contains(name), "missing {name}");
    }
}

const C_SMOKE: &str = r#"
#include <stdio.h>
#include "lrtuner.h"
int main(void) {
    double eps[3] = {-0.1, 0.0, 0.1};
    double loss[3];
    for (int i = 0; i < 3; i++) loss[i] = 2.0 + eps[i] * eps[i];
    LrtQuadFit fit;
    if (lrt_fit_quadratic(eps, loss, 3, &fit) != LRT_STATUS_OK) return 1;
    if (fit.k2 < 0.999 || fit.k2 > 1.001) return 2;
    LrtSchedule *s = NULL;
    if (lrt_schedule_new("{\"kind\":\"constant\",\"lr\":0.25}", 10, &s) != LRT_STATUS_OK) return 3;
    double lr = 0.0;
    if (lrt_schedule_lr_at(s, 3, &lr) != LRT_STATUS_OK || lr != 0.25) return 4;
    lrt_schedule_free(s);
    if (lrt_epsilon_bound(-1.0, 1.0, &lr) != LRT_STATUS_INVALID_ARGUMENT) return 5;
    printf("%s\n", lrt_last_error());
    return 0;
}
"#;

/// Compiles a C program against the header and the static library. Skipped
/// when no C compiler or static library is around.
#[test]
fn c_program_links_and_runs() {
    let Ok(exe) = std::env::current_exe() else { return };
    let profile_dir = exe.parent().and_then(|d| d.parent()).unwrap().to_path_buf();
    let lib = profile_dir.join("liblrtuner_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no static library or C compiler");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, C_SMOKE).unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("invalid argument"));
}
