//! C ABI for the quadratic probe, the schedules and the tuner controller.
//!
//! Every fallible function returns an [`LrtStatus`]; on failure a message is
//! available from [`lrt_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use lrtuner::quadprobe::{self, EpsilonProposal, LossSample, QuadFit};
use lrtuner::schedules::{self, ScheduleSpec};
use lrtuner::tuner::{Controller, Phase, TunerConfig, TunerEvent};
use lrtuner::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrtStatus {
    Ok = 0,
    InvalidArgument = 1,
    DegenerateDesign = 2,
    InvalidSample = 3,
    NullPointer = 4,
    Parse = 5,
    Protocol = 6,
    Internal = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn fail(status: LrtStatus, msg: impl Into<String>) -> LrtStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> LrtStatus {
    let status = match &e {
        Error::InvalidArgument(_) | Error::InvalidInput(_) | Error::Config(_) => LrtStatus::InvalidArgument,
        Error::DegenerateDesign { .. } => LrtStatus::DegenerateDesign,
        Error::InvalidSample(_) | Error::InvalidGradient { .. } => LrtStatus::InvalidSample,
        Error::Protocol(_) => LrtStatus::Protocol,
        _ => LrtStatus::Internal,
    };
    fail(status, e.to_string())
}

/// Runs `f`, turning panics into `Internal`.
fn guard(f: impl FnOnce() -> LrtStatus) -> LrtStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(LrtStatus::Internal, "panic inside lrtuner"))
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(LrtStatus::NullPointer, concat!("null pointer: ", stringify!($p)));
        })+
    };
}

/// Message for the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn lrt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrtQuadFit {
    pub k0: f64,
    pub k1: f64,
    pub k2: f64,
    pub residual_rms: f64,
}

impl From<QuadFit> for LrtQuadFit {
    fn from(f: QuadFit) -> Self {
        Self { k0: f.k0, k1: f.k1, k2: f.k2, residual_rms: f.residual_rms }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrtProposalKind {
    Accept = 0,
    RejectNoMinimum = 1,
    RejectPhaseFilter = 2,
    ClampedToBound = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrtProposal {
    pub kind: LrtProposalKind,
    /// Zero for rejections.
    pub epsilon: f64,
}

impl From<EpsilonProposal> for LrtProposal {
    fn from(p: EpsilonProposal) -> Self {
        let (kind, epsilon) = match p {
            EpsilonProposal::Accept(e) => (LrtProposalKind::Accept, e),
            EpsilonProposal::RejectNoMinimum => (LrtProposalKind::RejectNoMinimum, 0.0),
            EpsilonProposal::RejectPhaseFilter => (LrtProposalKind::RejectPhaseFilter, 0.0),
            EpsilonProposal::ClampedToBound(e) => (LrtProposalKind::ClampedToBound, e),
        };
        Self { kind, epsilon }
    }
}

unsafe fn samples<'a>(eps: *const f64, losses: *const f64, n: usize) -> Vec<LossSample> {
    let e = slice::from_raw_parts(eps, n);
    let l: &'a [f64] = slice::from_raw_parts(losses, n);
    e.iter().zip(l).map(|(&e, &l)| LossSample::new(e, l)).collect()
}

/// Least-squares quadratic through `n` points `(eps[i], losses[i])`.
///
/// # Safety
/// `eps` and `losses` must point to `n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lrt_fit_quadratic(eps: *const f64, losses: *const f64, n: usize, out: *mut LrtQuadFit) -> LrtStatus {
    non_null!(eps, losses, out);
    guard(|| match quadprobe::fit_quadratic(&samples(eps, losses, n)) {
        Ok(fit) => {
            *out = fit.into();
            LrtStatus::Ok
        }
        Err(e) => from_error(e),
    })
}

/// Trust bound `cbrt(r * loss)`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lrt_epsilon_bound(r: f64, loss: f64, out: *mut f64) -> LrtStatus {
    non_null!(out);
    guard(|| match quadprobe::epsilon_bound(r, loss) {
        Ok(b) => {
            *out = b;
            LrtStatus::Ok
        }
        Err(e) => from_error(e),
    })
}

/// # Safety
/// `fit` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lrt_propose_epsilon(fit: *const LrtQuadFit, bound: f64, out: *mut LrtProposal) -> LrtStatus {
    non_null!(fit, out);
    if !(bound >= 0.0) {
        return fail(LrtStatus::InvalidArgument, format!("bound must be non-negative, got {bound}"));
    }
    guard(|| {
        let f = &*fit;
        let q = QuadFit { k0: f.k0, k1: f.k1, k2: f.k2, residual_rms: f.residual_rms };
        *out = quadprobe::propose_epsilon(&q, bound).into();
        LrtStatus::Ok
    })
}

/// Writes the `n` probe offsets around `eta` to `out`.
///
/// # Safety
/// `out` must point to `n` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn lrt_probe_points(eta: f64, bound: f64, n: usize, span_fraction: f64, out: *mut f64) -> LrtStatus {
    non_null!(out);
    guard(|| match quadprobe::probe_points(eta, bound, n, span_fraction) {
        Ok(points) => {
            slice::from_raw_parts_mut(out, n).copy_from_slice(&points);
            LrtStatus::Ok
        }
        Err(e) => from_error(e),
    })
}

unsafe fn read_json<'a>(json: *const c_char) -> Result<&'a str, LrtStatus> {
    CStr::from_ptr(json).to_str().map_err(|_| fail(LrtStatus::Parse, "config is not valid UTF-8"))
}

/// A closed-form schedule bound to a run length.
pub struct LrtSchedule {
    spec: ScheduleSpec,
    total_steps: u64,
}

/// Parses a schedule from JSON, e.g. `{"kind":"one_cycle","max_lr":0.5}`.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lrt_schedule_new(json: *const c_char, total_steps: u64, out: *mut *mut LrtSchedule) -> LrtStatus {
    non_null!(json, out);
    guard(|| {
        let text = match read_json(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let spec: ScheduleSpec = match serde_json::from_str(text) {
            Ok(s) => s,
            Err(e) => return fail(LrtStatus::Parse, e.to_string()),
        };
        if let Err(e) = spec.validate() {
            return from_error(e);
        }
        if total_steps == 0 {
            return fail(LrtStatus::InvalidArgument, "total_steps must be positive");
        }
        *out = Box::into_raw(Box::new(LrtSchedule { spec, total_steps }));
        LrtStatus::Ok
    })
}

/// # Safety
/// `schedule` must come from [`lrt_schedule_new`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lrt_schedule_lr_at(schedule: *const LrtSchedule, step: u64, out: *mut f64) -> LrtStatus {
    non_null!(schedule, out);
    guard(|| {
        let s = &*schedule;
        match schedules::lr_at(&s.spec, step, s.total_steps) {
            Ok(lr) => {
                *out = lr;
                LrtStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `schedule` must come from [`lrt_schedule_new`] and not be used afterwards.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn lrt_schedule_free(schedule: *mut LrtSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// Tuner decision logic for hosts that run their own model: the host
/// evaluates losses at the offsets from [`lrt_controller_probe_grid`] and
/// passes them to [`lrt_controller_decide`].
pub struct LrtController {
    inner: Controller,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrtPhase {
    Explore = 0,
    Exploit = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrtEvent {
    RecomputeAccept = 0,
    RecomputeRejectPhase = 1,
    RecomputeRejectSaturation = 2,
    RecomputeRejectInvalid = 3,
    Rollback = 4,
    ManualChange = 5,
}

impl From<TunerEvent> for LrtEvent {
    fn from(e: TunerEvent) -> Self {
        match e {
            TunerEvent::RecomputeAccept { .. } => LrtEvent::RecomputeAccept,
            TunerEvent::RecomputeRejectPhase => LrtEvent::RecomputeRejectPhase,
            TunerEvent::RecomputeRejectSaturation => LrtEvent::RecomputeRejectSaturation,
            TunerEvent::RecomputeRejectInvalid => LrtEvent::RecomputeRejectInvalid,
            TunerEvent::Rollback => LrtEvent::Rollback,
            TunerEvent::ManualChange => LrtEvent::ManualChange,
        }
    }
}

/// Creates a controller from a JSON tuner config; `total_steps` is required
/// there, other fields have defaults.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lrt_controller_new(json: *const c_char, out: *mut *mut LrtController) -> LrtStatus {
    non_null!(json, out);
    guard(|| {
        let text = match read_json(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let cfg: TunerConfig = match serde_json::from_str(text) {
            Ok(c) => c,
            Err(e) => return fail(LrtStatus::Parse, e.to_string()),
        };
        match Controller::new(cfg) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(LrtController { inner }));
                LrtStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Current learning rate, or NaN for a null handle.
///
/// # Safety
/// `ctrl` must come from [`lrt_controller_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn lrt_controller_lr(ctrl: *const LrtController) -> f64 {
    if ctrl.is_null() {
        return f64::NAN;
    }
    (*ctrl).inner.lr()
}

/// # Safety
/// `ctrl` must come from [`lrt_controller_new`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lrt_controller_phase(ctrl: *const LrtController, step: u64, out: *mut LrtPhase) -> LrtStatus {
    non_null!(ctrl, out);
    *out = match (*ctrl).inner.phase(step) {
        Phase::Explore => LrtPhase::Explore,
        Phase::Exploit => LrtPhase::Exploit,
    };
    LrtStatus::Ok
}

/// Offsets to probe around the current learning rate, given the loss
/// measured at it. Writes `n_probes` values.
///
/// # Safety
/// `ctrl` must come from [`lrt_controller_new`]; `out` must hold `cap`
/// doubles; `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lrt_controller_probe_grid(
    ctrl: *const LrtController,
    loss_at_zero: f64,
    out: *mut f64,
    cap: usize,
    written: *mut usize,
) -> LrtStatus {
    non_null!(ctrl, out, written);
    guard(|| {
        let c = &(*ctrl).inner;
        let cfg = c.config();
        if cap < cfg.n_probes {
            return fail(LrtStatus::InvalidArgument, format!("need room for {} offsets, got {cap}", cfg.n_probes));
        }
        let grid = quadprobe::epsilon_bound(cfg.epsilon_threshold_r, loss_at_zero)
            .and_then(|b| quadprobe::probe_points(c.lr(), b, cfg.n_probes, cfg.span_fraction));
        match grid {
            Ok(points) => {
                slice::from_raw_parts_mut(out, points.len()).copy_from_slice(&points);
                *written = points.len();
                LrtStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Fits the probed losses and updates the learning rate.
///
/// # Safety
/// `ctrl` must come from [`lrt_controller_new`]; `eps` and `losses` must
/// point to `n` doubles; `event` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lrt_controller_decide(
    ctrl: *mut LrtController,
    step: u64,
    eps: *const f64,
    losses: *const f64,
    n: usize,
    loss_at_zero: f64,
    event: *mut LrtEvent,
) -> LrtStatus {
    non_null!(ctrl, eps, losses, event);
    guard(|| {
        let s = samples(eps, losses, n);
        *event = (*ctrl).inner.decide_from_samples(step, &s, loss_at_zero).into();
        LrtStatus::Ok
    })
}

/// Records a window drop rate at the current learning rate.
///
/// # Safety
/// `ctrl` must come from [`lrt_controller_new`].
#[no_mangle]
pub unsafe extern "C" fn lrt_controller_observe_rate(ctrl: *mut LrtController, rate: f64) -> LrtStatus {
    non_null!(ctrl);
    (*ctrl).inner.observe_rate(rate);
    LrtStatus::Ok
}

/// Exploit-phase gate: `*saturated` is true when a recompute is due.
///
/// # Safety
/// `ctrl` must come from [`lrt_controller_new`]; `saturated` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lrt_controller_saturation_gate(ctrl: *mut LrtController, rate: f64, saturated: *mut bool) -> LrtStatus {
    non_null!(ctrl, saturated);
    *saturated = (*ctrl).inner.saturation_gate(rate);
    LrtStatus::Ok
}

/// # Safety
/// `ctrl` must come from [`lrt_controller_new`] and not be used afterwards.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn lrt_controller_free(ctrl: *mut LrtController) {
    if !ctrl.is_null() {
        drop(Box::from_raw(ctrl));
    }
}
