//! One training run: engine, optimizer and a learning-rate policy stepped
//! together, producing one record per step.

use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::schedules::{self, ScheduleSpec};
use crate::tuner::{LrTuner, TunerCounters, TunerEvent};

#[derive(Debug, Clone)]
pub enum Policy {
    Tuner(LrTuner),
    Schedule(ScheduleSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepEvent {
    None,
    Tuner(TunerEvent),
    PhaseSwitch,
}

impl StepEvent {
    pub fn tag(&self) -> &'static str {
        match self {
            StepEvent::None => "none",
            StepEvent::Tuner(e) => e.tag(),
            StepEvent::PhaseSwitch => "phase_switch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    /// Learning rate applied at this step.
    pub lr: f64,
    /// Minibatch loss before the update.
    pub train_loss: f64,
    /// Superbatch loss measured at this step, when one was.
    pub superbatch_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    /// Cumulative forward passes spent on probing.
    pub probe_fwd: u64,
    pub event: StepEvent,
}

pub struct Session {
    engine: Engine,
    optimizer: Optimizer,
    policy: Policy,
    step: u64,
    total_steps: u64,
    eval_every: u64,
}

impl Session {
    pub fn new(engine: Engine, optimizer: Optimizer, policy: Policy, total_steps: u64, eval_every: u64) -> Result<Self> {
        if total_steps == 0 || eval_every == 0 {
            return Err(Error::Config("total_steps and eval_every must be positive".into()));
        }
        match &policy {
            Policy::Tuner(t) if t.config().total_steps != total_steps => {
                return Err(Error::Config(format!(
                    "tuner configured for {} steps, run has {total_steps}",
                    t.config().total_steps
                )))
            }
            Policy::Schedule(s) => s.validate()?,
            _ => {}
        }
        Ok(Self { engine, optimizer, policy, step: 0, total_steps, eval_every })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn engine_mut(&mut self) -> &mut Engine {
        &mut self.engine
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn policy_mut(&mut self) -> &mut Policy {
        &mut self.policy
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn tuner_counters(&self) -> Option<TunerCounters> {
        match &self.policy {
            Policy::Tuner(t) => Some(*t.counters()),
            Policy::Schedule(_) => None,
        }
    }

    /// Learning rate the next step will use, if already known.
    pub fn current_lr(&self) -> Result<f64> {
        match &self.policy {
            Policy::Tuner(t) => Ok(t.lr()),
            Policy::Schedule(s) => schedules::lr_at(s, self.step.min(self.total_steps - 1), self.total_steps),
        }
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        if self.is_done() {
            return Err(Error::Protocol(format!("run already finished after {} steps", self.total_steps)));
        }
        let step = self.step;
        let mut event = StepEvent::None;

        if let Policy::Tuner(t) = &mut self.policy {
            if let Some(e) = t.begin_step(step, &mut self.engine, &mut self.optimizer)? {
                event = StepEvent::Tuner(e);
            }
        }
        let epoch = self.engine.epoch();
        let rows = self.engine.next_minibatch();
        let (train_loss, grads) = self.engine.backward(&rows)?;
        if !train_loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        let (direction, pending) = self.optimizer.compute_direction(self.engine.params(), &grads)?;

        let (lr, superbatch_loss, probe_fwd) = match &mut self.policy {
            Policy::Tuner(t) => {
                if let Some(e) = t.plan_step(step, &mut self.engine, &direction)? {
                    if event == StepEvent::None {
                        event = StepEvent::Tuner(e);
                    }
                }
                if event == StepEvent::None && step > 0 && step == t.config().explore_steps() {
                    event = StepEvent::PhaseSwitch;
                }
                let sb = if t.is_boundary(step) { t.window_start_loss() } else { None };
                (t.lr(), sb, t.counters().probe_forward_passes)
            }
            Policy::Schedule(s) => {
                if let Some(m) = schedules::momentum_at(s, step, self.total_steps) {
                    self.optimizer.set_momentum(m);
                }
                (schedules::lr_at(s, step, self.total_steps)?, None, 0)
            }
        };
        if lr > 0.0 {
            self.optimizer.commit_step(self.engine.params_mut(), &direction, lr, pending)?;
        }
        self.step += 1;

        let (test_loss, test_acc) = if self.step % self.eval_every == 0 || self.is_done() {
            let (l, a) = self.engine.evaluate_test()?;
            (Some(l), a)
        } else {
            (None, None)
        };
        Ok(StepRecord { step, epoch, lr, train_loss, superbatch_loss, test_loss, test_acc, probe_fwd, event })
    }

    /// Runs to completion, handing each record to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let rec = self.step()?;
            sink(&rec)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{DataSource, QuadraticBowl};
    use crate::optim::OptimizerSpec;
    use crate::tuner::{ExploreBudget, TunerConfig};

    fn bowl_engine() -> Engine {
        let bowl = QuadraticBowl::with_noise(&[1.0, 10.0], &[1.0, 1.0], 64, 0.1, 3).unwrap();
        Engine::from_source(DataSource::Bowl(bowl), None, 4, 3).unwrap()
    }

    fn sgd() -> Optimizer {
        Optimizer::new(&OptimizerSpec::Sgd { weight_decay: 0.0 }, 2).unwrap()
    }

    #[test]
    fn schedule_lr_column_matches() {
        let spec = ScheduleSpec::one_cycle(0.1);
        let mut s = Session::new(bowl_engine(), sgd(), Policy::Schedule(spec.clone()), 50, 16).unwrap();
        let mut recs = Vec::new();
        s.run(|r| {
            recs.push(r.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(recs.len(), 50);
        for r in &recs {
            assert_eq!(r.lr, schedules::lr_at(&spec, r.step, 50).unwrap());
        }
        assert!(recs[15].test_loss.is_some() && recs[14].test_loss.is_none() && recs[49].test_loss.is_some());
    }

    #[test]
    fn tuner_events_on_boundaries() {
        let cfg = TunerConfig {
            seed_lr: 0.01,
            explore: ExploreBudget::Steps(45),
            recompute_window: 10,
            superbatch_size: 4,
            ..TunerConfig::new(100)
        };
        let tuner = LrTuner::new(cfg).unwrap();
        let mut s = Session::new(bowl_engine(), sgd(), Policy::Tuner(tuner), 100, 16).unwrap();
        let mut recs = Vec::new();
        s.run(|r| {
            recs.push(r.clone());
            Ok(())
        })
        .unwrap();
        for r in &recs {
            if r.step % 10 == 0 {
                assert_ne!(r.event, StepEvent::None, "step {}", r.step);
                assert!(r.superbatch_loss.is_some());
            } else if r.step == 45 {
                assert_eq!(r.event, StepEvent::PhaseSwitch);
            } else {
                assert_eq!(r.event, StepEvent::None);
            }
        }
        let c = s.tuner_counters().unwrap();
        assert_eq!(c.recomputes + c.rejects_saturation + c.rollbacks, 10);
        assert!(recs.windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn stepping_past_end_fails() {
        let mut s = Session::new(bowl_engine(), sgd(), Policy::Schedule(ScheduleSpec::Constant { lr: 0.01 }), 2, 1).unwrap();
        s.step().unwrap();
        s.step().unwrap();
        assert!(matches!(s.step(), Err(Error::Protocol(_))));
    }
}
