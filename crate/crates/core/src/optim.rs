//! Optimizers that split a step into "compute the direction" and "commit".
//!
//! Every optimizer's update is written as `theta <- theta - lr * d`, so a
//! probe of a different step size only needs `d`. Computing a direction
//! leaves the committed state untouched; the post-step state travels in a
//! [`Pending`] value that [`Optimizer::commit_step`] consumes.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::engine::{Engine, StreamCursor};
use crate::error::{Error, Result};

/// Flat model parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

/// Step direction `d` in `theta <- theta - lr * d`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Direction(pub Vec<f64>);

macro_rules! vec_newtype {
    ($t:ty) => {
        impl Deref for $t {
            type Target = Vec<f64>;
            fn deref(&self) -> &Vec<f64> {
                &self.0
            }
        }
        impl DerefMut for $t {
            fn deref_mut(&mut self) -> &mut Vec<f64> {
                &mut self.0
            }
        }
    };
}
vec_newtype!(ParamVector);
vec_newtype!(Direction);

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

/// Optimizer choice as written in a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Sgd {
        #[serde(default)]
        weight_decay: f64,
    },
    /// Heavy-ball momentum: `v <- mu v + g`, `d = v`.
    Momentum {
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    /// Adam with L2 weight decay folded into the gradient.
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    /// Adam with decoupled weight decay applied at commit.
    AdamW {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd {
        weight_decay: f64,
    },
    Momentum {
        mu: f64,
        weight_decay: f64,
        velocity: Vec<f64>,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps_stab: f64,
        weight_decay: f64,
        decoupled: bool,
        step_count: u64,
        m: Vec<f64>,
        v: Vec<f64>,
    },
}

impl OptimizerState {
    fn buffer_len(&self) -> Option<usize> {
        match self {
            OptimizerState::Sgd { .. } => None,
            OptimizerState::Momentum { velocity, .. } => Some(velocity.len()),
            OptimizerState::Adam { m, .. } => Some(m.len()),
        }
    }
}

/// Post-step optimizer state, valid only against the state it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Pending {
    state: OptimizerState,
    base_generation: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    state: OptimizerState,
    step_index: u64,
    /// Bumped on every commit or restore; stale `Pending` values are refused.
    generation: u64,
}

impl Optimizer {
    pub fn new(spec: &OptimizerSpec, num_params: usize) -> Result<Self> {
        let state = match *spec {
            OptimizerSpec::Sgd { weight_decay } => OptimizerState::Sgd { weight_decay },
            OptimizerSpec::Momentum { momentum, weight_decay } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::invalid(format!("momentum must lie in [0, 1), got {momentum}")));
                }
                OptimizerState::Momentum { mu: momentum, weight_decay, velocity: vec![0.0; num_params] }
            }
            OptimizerSpec::Adam { beta1, beta2, eps, weight_decay }
            | OptimizerSpec::AdamW { beta1, beta2, eps, weight_decay } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps >= 0.0) {
                    return Err(Error::invalid("adam needs 0 <= beta1, beta2 < 1 and eps >= 0"));
                }
                OptimizerState::Adam {
                    beta1,
                    beta2,
                    eps_stab: eps,
                    weight_decay,
                    decoupled: matches!(spec, OptimizerSpec::AdamW { .. }),
                    step_count: 0,
                    m: vec![0.0; num_params],
                    v: vec![0.0; num_params],
                }
            }
        };
        Ok(Self { state, step_index: 0, generation: 0 })
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    /// Changes the momentum coefficient in place (one-cycle momentum cycling).
    pub fn set_momentum(&mut self, value: f64) {
        match &mut self.state {
            OptimizerState::Momentum { mu, .. } => *mu = value,
            OptimizerState::Adam { beta1, .. } => *beta1 = value,
            OptimizerState::Sgd { .. } => {}
        }
    }

    /// Direction for the next step and the state that committing it would leave.
    pub fn compute_direction(&self, params: &[f64], grads: &[f64]) -> Result<(Direction, Pending)> {
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::InvalidGradient { index });
        }
        if grads.len() != params.len() || self.state.buffer_len().is_some_and(|n| n != grads.len()) {
            return Err(Error::InvalidInput(format!(
                "gradient has {} entries, parameters have {}",
                grads.len(),
                params.len()
            )));
        }
        let (d, state) = match &self.state {
            OptimizerState::Sgd { weight_decay } => {
                let d = grads.iter().zip(params).map(|(g, p)| g + weight_decay * p).collect();
                (d, self.state.clone())
            }
            OptimizerState::Momentum { mu, weight_decay, velocity } => {
                let v: Vec<f64> = velocity
                    .iter()
                    .zip(grads.iter().zip(params))
                    .map(|(v, (g, p))| mu * v + g + weight_decay * p)
                    .collect();
                (v.clone(), OptimizerState::Momentum { mu: *mu, weight_decay: *weight_decay, velocity: v })
            }
            OptimizerState::Adam { beta1, beta2, eps_stab, weight_decay, decoupled, step_count, m, v } => {
                let t = step_count + 1;
                let c1 = 1.0 - beta1.powi(t as i32);
                let c2 = 1.0 - beta2.powi(t as i32);
                let mut m_new = Vec::with_capacity(grads.len());
                let mut v_new = Vec::with_capacity(grads.len());
                let mut d = Vec::with_capacity(grads.len());
                for i in 0..grads.len() {
                    let g = if *decoupled { grads[i] } else { grads[i] + weight_decay * params[i] };
                    let mi = beta1 * m[i] + (1.0 - beta1) * g;
                    let vi = beta2 * v[i] + (1.0 - beta2) * g * g;
                    d.push((mi / c1) / ((vi / c2).sqrt() + eps_stab));
                    m_new.push(mi);
                    v_new.push(vi);
                }
                let state = OptimizerState::Adam {
                    beta1: *beta1,
                    beta2: *beta2,
                    eps_stab: *eps_stab,
                    weight_decay: *weight_decay,
                    decoupled: *decoupled,
                    step_count: t,
                    m: m_new,
                    v: v_new,
                };
                (d, state)
            }
        };
        Ok((Direction(d), Pending { state, base_generation: self.generation }))
    }

    /// Applies `theta <- theta - lr * d` (plus decoupled decay) and adopts `pending`.
    pub fn commit_step(&mut self, params: &mut ParamVector, d: &Direction, lr: f64, pending: Pending) -> Result<()> {
        if pending.base_generation != self.generation {
            return Err(Error::Protocol(format!(
                "pending state from generation {} committed against generation {}",
                pending.base_generation, self.generation
            )));
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        if d.len() != params.len() {
            return Err(Error::Protocol(format!(
                "direction has {} entries, parameters have {}",
                d.len(),
                params.len()
            )));
        }
        let decay = match &pending.state {
            OptimizerState::Adam { decoupled: true, weight_decay, .. } => *weight_decay,
            _ => 0.0,
        };
        for (p, di) in params.iter_mut().zip(d.iter()) {
            *p = *p - lr * di - lr * decay * *p;
        }
        self.state = pending.state;
        self.step_index += 1;
        self.generation += 1;
        Ok(())
    }
}

/// Everything needed to put a run back where it was.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub params: ParamVector,
    pub opt_state: OptimizerState,
    pub lr: f64,
    pub step_index: u64,
    pub rng_cursor: StreamCursor,
}

impl Snapshot {
    pub fn take(engine: &Engine, optimizer: &Optimizer, lr: f64) -> Self {
        Self {
            params: engine.params().clone(),
            opt_state: optimizer.state.clone(),
            lr,
            step_index: optimizer.step_index,
            rng_cursor: engine.cursor(),
        }
    }

    /// Restores parameters, optimizer state, step index and data cursor.
    /// The learning rate is returned for the caller to re-apply.
    pub fn restore(&self, engine: &mut Engine, optimizer: &mut Optimizer) -> Result<f64> {
        let expected = engine.params().len();
        if self.params.len() != expected {
            return Err(Error::IncompatibleSnapshot { expected, found: self.params.len() });
        }
        if let Some(n) = self.opt_state.buffer_len() {
            if n != expected {
                return Err(Error::IncompatibleSnapshot { expected, found: n });
            }
        }
        engine.set_params(self.params.clone())?;
        engine.restore_cursor(&self.rng_cursor);
        optimizer.state = self.opt_state.clone();
        optimizer.step_index = self.step_index;
        optimizer.generation += 1;
        Ok(self.lr)
    }
}
