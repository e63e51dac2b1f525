//! Learning-rate tuner.
//!
//! Every `recompute_window` steps the tuner probes the loss at a few step
//! sizes around the current learning rate, all on one superbatch, fits a
//! quadratic and moves the learning rate to the fitted minimum (within the
//! trust bound). Training runs in two phases: during explore only increases
//! are admitted, during exploit only decreases, and in exploit a recompute
//! happens only once the loss-drop rate at the current learning rate has
//! saturated. An accepted change whose following window drops the loss much
//! more slowly than the window before it is rolled back.
//!
//! [`Controller`] holds the decision logic with no access to a model, so it
//! can be driven from outside (see the FFI crate). [`LrTuner`] wraps it with
//! probing, window measurement and rollback against an [`Engine`].

use serde::{Deserialize, Serialize};

use crate::engine::{Engine, Superbatch};
use crate::error::{Error, Result};
use crate::optim::{Direction, Optimizer, Snapshot};
use crate::quadprobe::{self, EpsilonProposal, LossSample};

/// Smallest drop rate used as a denominator or captured threshold.
pub const TINY_RATE: f64 = 1e-12;

/// How long the explore phase lasts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExploreBudget {
    /// Fraction of `total_steps`.
    Fraction(f64),
    Steps(u64),
}

fn default_seed_lr() -> f64 {
    0.1
}
fn default_explore() -> ExploreBudget {
    ExploreBudget::Fraction(0.25)
}
fn default_window() -> u64 {
    100
}
fn default_superbatch() -> usize {
    100
}
fn default_probes() -> usize {
    5
}
fn default_r() -> f64 {
    1e-3
}
fn default_saturation() -> f64 {
    100.0
}
fn default_span() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}
fn default_rollback_factor() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TunerConfig {
    #[serde(default = "default_seed_lr")]
    pub seed_lr: f64,
    #[serde(default = "default_explore")]
    pub explore: ExploreBudget,
    pub total_steps: u64,
    /// Steps between recomputes.
    #[serde(default = "default_window")]
    pub recompute_window: u64,
    /// Superbatch size in minibatches.
    #[serde(default = "default_superbatch")]
    pub superbatch_size: usize,
    #[serde(default = "default_probes")]
    pub n_probes: usize,
    /// `r` in `|eps|^3 <= r * L`.
    #[serde(default = "default_r")]
    pub epsilon_threshold_r: f64,
    #[serde(default = "default_saturation")]
    pub saturation_threshold_rel: f64,
    #[serde(default = "default_span")]
    pub span_fraction: f64,
    #[serde(default = "default_true")]
    pub rollback_enabled: bool,
    /// Roll back when the post-change drop rate falls below this fraction
    /// of the pre-change rate.
    #[serde(default = "default_rollback_factor")]
    pub rollback_factor: f64,
}

impl TunerConfig {
    pub fn new(total_steps: u64) -> Self {
        Self {
            seed_lr: default_seed_lr(),
            explore: default_explore(),
            total_steps,
            recompute_window: default_window(),
            superbatch_size: default_superbatch(),
            n_probes: default_probes(),
            epsilon_threshold_r: default_r(),
            saturation_threshold_rel: default_saturation(),
            span_fraction: default_span(),
            rollback_enabled: true,
            rollback_factor: default_rollback_factor(),
        }
    }

    pub fn explore_steps(&self) -> u64 {
        match self.explore {
            ExploreBudget::Fraction(f) => (f * self.total_steps as f64).round() as u64,
            ExploreBudget::Steps(s) => s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.seed_lr > 0.0 && self.seed_lr.is_finite()) {
            return bad(format!("seed_lr must be positive, got {}", self.seed_lr));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if let ExploreBudget::Fraction(f) = self.explore {
            if !(0.0..1.0).contains(&f) {
                return bad(format!("explore fraction must lie in [0, 1), got {f}"));
            }
        }
        if self.explore_steps() >= self.total_steps {
            return bad(format!(
                "explore steps ({}) must be fewer than total steps ({})",
                self.explore_steps(),
                self.total_steps
            ));
        }
        if self.recompute_window == 0 || self.superbatch_size == 0 {
            return bad("recompute_window and superbatch_size must be at least 1".into());
        }
        if self.n_probes < 3 {
            return bad(format!("n_probes must be at least 3, got {}", self.n_probes));
        }
        if !(self.epsilon_threshold_r > 0.0) {
            return bad("epsilon_threshold_r must be positive".into());
        }
        if !(self.saturation_threshold_rel > 1.0) {
            return bad("saturation_threshold_rel must exceed 1".into());
        }
        if !(self.span_fraction > 0.0 && self.span_fraction <= 1.0) {
            return bad("span_fraction must lie in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.rollback_factor) {
            return bad("rollback_factor must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Loss evaluations per recompute: the grid, plus the centre point when
    /// the grid does not contain it.
    pub fn probes_per_recompute(&self) -> usize {
        if self.n_probes % 2 == 1 {
            self.n_probes
        } else {
            self.n_probes + 1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Explore,
    Exploit,
}

pub fn phase_at(step: u64, cfg: &TunerConfig) -> Phase {
    if step < cfg.explore_steps() {
        Phase::Explore
    } else {
        Phase::Exploit
    }
}

/// Explore admits only increases, exploit only decreases. Zero always passes.
pub fn phase_filter(phase: Phase, proposal: EpsilonProposal) -> EpsilonProposal {
    match proposal.epsilon() {
        Some(eps) if phase == Phase::Explore && eps < 0.0 => EpsilonProposal::RejectPhaseFilter,
        Some(eps) if phase == Phase::Exploit && eps > 0.0 => EpsilonProposal::RejectPhaseFilter,
        _ => proposal,
    }
}

/// Loss drop per step; negative when the loss rose.
pub fn drop_rate(loss_start: f64, loss_end: f64, steps: u64) -> f64 {
    (loss_start - loss_end) / steps.max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaturationMode {
    /// Compares against the drop rate measured when the current learning
    /// rate was adopted.
    Relative { initial_drop_rate: f64 },
    /// Captured the first time the relative test fired; fixed from then on.
    Absolute { threshold_rate: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaturationState {
    pub mode: SaturationMode,
    pub window_start_loss: f64,
    pub window_start_step: u64,
}

impl SaturationState {
    pub fn relative(initial_drop_rate: f64) -> Self {
        Self {
            mode: SaturationMode::Relative { initial_drop_rate },
            window_start_loss: f64::NAN,
            window_start_step: 0,
        }
    }
}

pub fn saturation_check(state: &SaturationState, current_rate: f64, cfg: &TunerConfig) -> (bool, SaturationState) {
    match state.mode {
        SaturationMode::Relative { initial_drop_rate } => {
            let saturated = current_rate <= 0.0
                || initial_drop_rate / current_rate.max(TINY_RATE) >= cfg.saturation_threshold_rel;
            let next = if saturated {
                SaturationState {
                    mode: SaturationMode::Absolute { threshold_rate: current_rate.max(TINY_RATE) },
                    ..*state
                }
            } else {
                *state
            };
            (saturated, next)
        }
        SaturationMode::Absolute { threshold_rate } => (current_rate <= threshold_rate, *state),
    }
}

/// Whether a change should be undone, given the drop rate over the window
/// before it and the first full window after it. For a positive `before`
/// this is `after < factor * before`; a negative `before` gets the same
/// relative slack.
pub fn should_rollback(rate_before: f64, rate_after: f64, factor: f64) -> bool {
    rate_after < rate_before - (1.0 - factor) * rate_before.abs()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TunerCounters {
    pub recomputes: u64,
    pub accepts: u64,
    pub rejects_phase: u64,
    pub rejects_saturation: u64,
    pub rejects_invalid: u64,
    pub rollbacks: u64,
    pub probe_forward_passes: u64,
    /// Superbatch evaluations spent measuring drop rates.
    pub window_forward_passes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TunerEvent {
    RecomputeAccept { epsilon: f64 },
    RecomputeRejectPhase,
    RecomputeRejectSaturation,
    /// The fit or the positivity guard produced nothing usable.
    RecomputeRejectInvalid,
    Rollback,
    ManualChange,
}

impl TunerEvent {
    pub fn tag(&self) -> &'static str {
        match self {
            TunerEvent::RecomputeAccept { .. } => "recompute_accept",
            TunerEvent::RecomputeRejectPhase => "recompute_reject_phase",
            TunerEvent::RecomputeRejectSaturation => "recompute_reject_saturation",
            TunerEvent::RecomputeRejectInvalid => "recompute_reject_invalid",
            TunerEvent::Rollback => "rollback",
            TunerEvent::ManualChange => "manual_change",
        }
    }
}

/// Decision logic of the tuner, independent of any model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    cfg: TunerConfig,
    current_lr: f64,
    /// `None` until a window at the current learning rate has been measured.
    saturation: Option<SaturationState>,
    counters: TunerCounters,
}

impl Controller {
    pub fn new(cfg: TunerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { current_lr: cfg.seed_lr, cfg, saturation: None, counters: TunerCounters::default() })
    }

    pub fn config(&self) -> &TunerConfig {
        &self.cfg
    }

    pub fn lr(&self) -> f64 {
        self.current_lr
    }

    pub fn counters(&self) -> &TunerCounters {
        &self.counters
    }

    pub fn saturation(&self) -> Option<&SaturationState> {
        self.saturation.as_ref()
    }

    pub fn phase(&self, step: u64) -> Phase {
        phase_at(step, &self.cfg)
    }

    /// Records a drop rate measured over a window at the current learning
    /// rate. The first one after an lr change becomes the relative baseline.
    pub fn observe_rate(&mut self, rate: f64) {
        match &mut self.saturation {
            None => self.saturation = Some(SaturationState::relative(rate)),
            Some(_) => {}
        }
    }

    /// Exploit-phase gate: true when the current lr has saturated. Switches
    /// to an absolute threshold the first time the relative test fires.
    pub fn saturation_gate(&mut self, rate: f64) -> bool {
        let Some(state) = self.saturation else {
            return false;
        };
        let (saturated, next) = saturation_check(&state, rate, &self.cfg);
        self.saturation = Some(next);
        saturated
    }

    pub fn note_saturation_reject(&mut self) {
        self.counters.rejects_saturation += 1;
    }

    /// Applies the phase rule and the positivity guard, then moves the
    /// learning rate. Counts one recompute.
    pub fn decide(&mut self, step: u64, proposal: EpsilonProposal) -> TunerEvent {
        self.counters.recomputes += 1;
        let filtered = phase_filter(self.phase(step), proposal);
        match filtered {
            EpsilonProposal::RejectPhaseFilter => {
                self.counters.rejects_phase += 1;
                TunerEvent::RecomputeRejectPhase
            }
            EpsilonProposal::RejectNoMinimum => {
                self.counters.rejects_invalid += 1;
                TunerEvent::RecomputeRejectInvalid
            }
            EpsilonProposal::Accept(eps) | EpsilonProposal::ClampedToBound(eps) => {
                let next = self.current_lr + eps;
                if !(next > 0.0 && next.is_finite()) {
                    self.counters.rejects_invalid += 1;
                    return TunerEvent::RecomputeRejectInvalid;
                }
                self.counters.accepts += 1;
                if eps != 0.0 {
                    self.set_lr_internal(next);
                }
                TunerEvent::RecomputeAccept { epsilon: eps }
            }
        }
    }

    /// Full recompute from probed samples: fit, bound, propose, decide.
    /// `loss_at_zero` is the probed loss at the current learning rate.
    pub fn decide_from_samples(&mut self, step: u64, samples: &[LossSample], loss_at_zero: f64) -> TunerEvent {
        let proposal = propose_from_samples(samples, loss_at_zero, self.cfg.epsilon_threshold_r);
        self.decide(step, proposal)
    }

    fn set_lr_internal(&mut self, lr: f64) {
        self.current_lr = lr;
        // A new lr needs a fresh relative baseline; an absolute threshold stays.
        if let Some(SaturationState { mode: SaturationMode::Relative { .. }, .. }) = self.saturation {
            self.saturation = None;
        }
    }

    /// Moves the learning rate outside the proposal path.
    pub fn force_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        self.set_lr_internal(lr);
        Ok(())
    }

    pub(crate) fn add_probe_passes(&mut self, n: u64) {
        self.counters.probe_forward_passes += n;
    }

    pub(crate) fn add_window_passes(&mut self, n: u64) {
        self.counters.window_forward_passes += n;
    }

    fn restore_after_rollback(&mut self, lr: f64, saturation: Option<SaturationState>) {
        self.current_lr = lr;
        self.saturation = saturation;
        self.counters.rollbacks += 1;
    }
}

/// Fit and bound a set of probed samples; non-finite samples are dropped.
pub fn propose_from_samples(samples: &[LossSample], loss_at_zero: f64, r: f64) -> EpsilonProposal {
    let finite: Vec<LossSample> = samples.iter().copied().filter(|s| s.loss.is_finite()).collect();
    if finite.len() < 3 || !loss_at_zero.is_finite() {
        return EpsilonProposal::RejectNoMinimum;
    }
    let Ok(bound) = quadprobe::epsilon_bound(r, loss_at_zero.max(0.0)) else {
        return EpsilonProposal::RejectNoMinimum;
    };
    match quadprobe::fit_quadratic(&finite) {
        Ok(fit) => quadprobe::propose_epsilon(&fit, bound),
        Err(_) => EpsilonProposal::RejectNoMinimum,
    }
}

#[derive(Debug, Clone)]
struct OpenWindow {
    superbatch: Superbatch,
    start_loss: f64,
    start_step: u64,
}

#[derive(Debug, Clone)]
struct RollbackCandidate {
    snapshot: Snapshot,
    rate_before: f64,
    saturation_before: Option<SaturationState>,
}

/// Everything a recompute saw; useful for logging and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRecord {
    pub step: u64,
    pub lr_before: f64,
    pub samples: Vec<LossSample>,
    pub superbatch: Superbatch,
    pub event: TunerEvent,
}

/// Tuner bound to an engine and optimizer. Call [`LrTuner::begin_step`]
/// before drawing the step's minibatch and [`LrTuner::plan_step`] after the
/// direction is known and before committing it.
#[derive(Debug, Clone)]
pub struct LrTuner {
    ctrl: Controller,
    window: Option<OpenWindow>,
    last_rate: Option<f64>,
    candidate: Option<RollbackCandidate>,
    pre_step: Option<Snapshot>,
    rolled_back_at: Option<u64>,
    manual: Option<f64>,
    last_probe: Option<ProbeRecord>,
}

impl LrTuner {
    pub fn new(cfg: TunerConfig) -> Result<Self> {
        Ok(Self {
            ctrl: Controller::new(cfg)?,
            window: None,
            last_rate: None,
            candidate: None,
            pre_step: None,
            rolled_back_at: None,
            manual: None,
            last_probe: None,
        })
    }

    pub fn controller(&self) -> &Controller {
        &self.ctrl
    }

    pub fn lr(&self) -> f64 {
        self.ctrl.lr()
    }

    pub fn counters(&self) -> &TunerCounters {
        self.ctrl.counters()
    }

    pub fn config(&self) -> &TunerConfig {
        self.ctrl.config()
    }

    pub fn last_rate(&self) -> Option<f64> {
        self.last_rate
    }

    pub fn last_probe(&self) -> Option<&ProbeRecord> {
        self.last_probe.as_ref()
    }

    /// Loss at the start of the open measurement window.
    pub fn window_start_loss(&self) -> Option<f64> {
        self.window.as_ref().map(|w| w.start_loss)
    }

    pub fn is_boundary(&self, step: u64) -> bool {
        step % self.ctrl.cfg.recompute_window == 0
    }

    /// Replaces the next recompute with a change to `lr`. The change is
    /// rollback-eligible like an accepted proposal.
    pub fn schedule_manual_lr(&mut self, lr: f64) {
        self.manual = Some(lr);
    }

    /// Closes the measurement window and runs the rollback test. May
    /// restore `engine` and `optimizer` to an earlier snapshot.
    pub fn begin_step(&mut self, step: u64, engine: &mut Engine, optimizer: &mut Optimizer) -> Result<Option<TunerEvent>> {
        if !self.is_boundary(step) {
            return Ok(None);
        }
        let mut event = None;
        if let Some(w) = self.window.take() {
            let end = engine.superbatch_loss(&w.superbatch)?;
            self.ctrl.add_window_passes(w.superbatch.size_in_minibatches() as u64);
            let rate = drop_rate(w.start_loss, end, step - w.start_step);
            self.last_rate = Some(rate);

            if let Some(c) = self.candidate.take() {
                if self.ctrl.cfg.rollback_enabled
                    && should_rollback(c.rate_before, rate, self.ctrl.cfg.rollback_factor)
                {
                    log::info!(
                        "step {step}: rolling back lr change (rate {:.3e} -> {rate:.3e})",
                        c.rate_before
                    );
                    // Fresh superbatches after the rollback; only the data order rewinds.
                    let sb_pos = engine.cursor().superbatch_position();
                    let lr = c.snapshot.restore(engine, optimizer)?;
                    engine.seek_superbatch(sb_pos);
                    self.ctrl.restore_after_rollback(lr, c.saturation_before);
                    self.last_rate = Some(c.rate_before);
                    self.rolled_back_at = Some(step);
                    event = Some(TunerEvent::Rollback);
                }
            }
            if event.is_none() {
                self.ctrl.observe_rate(rate);
            }
        }
        self.pre_step = Some(Snapshot::take(engine, optimizer, self.ctrl.lr()));
        Ok(event)
    }

    /// Recomputes the learning rate if due, then opens the next window.
    pub fn plan_step(&mut self, step: u64, engine: &mut Engine, direction: &Direction) -> Result<Option<TunerEvent>> {
        if !self.is_boundary(step) {
            return Ok(None);
        }
        let lr_before = self.ctrl.lr();
        let saturation_before = self.ctrl.saturation;
        let event = if self.rolled_back_at == Some(step) {
            None
        } else if let Some(lr) = self.manual.take() {
            self.ctrl.force_lr(lr)?;
            Some(TunerEvent::ManualChange)
        } else {
            match self.ctrl.phase(step) {
                Phase::Explore => Some(self.recompute(step, engine, direction)?),
                Phase::Exploit => {
                    let saturated = self.last_rate.is_some_and(|r| self.ctrl.saturation_gate(r));
                    if saturated {
                        Some(self.recompute(step, engine, direction)?)
                    } else {
                        self.ctrl.note_saturation_reject();
                        Some(TunerEvent::RecomputeRejectSaturation)
                    }
                }
            }
        };

        if self.ctrl.lr() != lr_before {
            self.candidate = match (self.pre_step.take(), self.last_rate) {
                (Some(mut snapshot), Some(rate_before)) => {
                    snapshot.lr = lr_before;
                    Some(RollbackCandidate { snapshot, rate_before, saturation_before })
                }
                _ => None,
            };
        }
        self.pre_step = None;

        let superbatch = engine.draw_superbatch(self.ctrl.cfg.superbatch_size)?;
        let start_loss = engine.superbatch_loss(&superbatch)?;
        self.ctrl.add_window_passes(superbatch.size_in_minibatches() as u64);
        self.window = Some(OpenWindow { superbatch, start_loss, start_step: step });
        Ok(event)
    }

    /// Probes, fits and decides. Every probe uses the same superbatch.
    pub fn recompute(&mut self, step: u64, engine: &mut Engine, direction: &Direction) -> Result<TunerEvent> {
        let cfg = self.ctrl.cfg.clone();
        let eta = self.ctrl.lr();
        let sb = engine.draw_superbatch(cfg.superbatch_size)?;
        let per_probe = sb.size_in_minibatches() as u64;

        let loss_at_zero = engine.perturbed_loss(direction, eta, &sb)?;
        self.ctrl.add_probe_passes(per_probe);
        let mut samples = Vec::with_capacity(cfg.n_probes);
        let bound = if loss_at_zero.is_finite() {
            quadprobe::epsilon_bound(cfg.epsilon_threshold_r, loss_at_zero.max(0.0))?
        } else {
            0.0
        };
        let event = if bound > 0.0 {
            let grid = quadprobe::probe_points(eta, bound, cfg.n_probes, cfg.span_fraction)?;
            for eps in grid {
                let loss = if eps == 0.0 {
                    loss_at_zero
                } else {
                    self.ctrl.add_probe_passes(per_probe);
                    engine.perturbed_loss(direction, eta + eps, &sb)?
                };
                samples.push(LossSample::new(eps, loss));
            }
            if samples.iter().all(|s| !s.loss.is_finite()) {
                log::warn!("step {step}: every probe loss was non-finite; keeping lr {eta}");
            }
            self.ctrl.decide_from_samples(step, &samples, loss_at_zero)
        } else {
            log::warn!("step {step}: probe loss {loss_at_zero} leaves no room to move lr");
            self.ctrl.decide(step, EpsilonProposal::RejectNoMinimum)
        };
        log::debug!("step {step}: recompute lr {eta} -> {} ({})", self.ctrl.lr(), event.tag());
        self.last_probe = Some(ProbeRecord { step, lr_before: eta, samples, superbatch: sb, event });
        Ok(event)
    }
}
