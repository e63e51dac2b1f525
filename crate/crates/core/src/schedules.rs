//! Closed-form baseline schedules and the LR range test.

use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::stats::ExpSmoother;

fn zero() -> f64 {
    0.0
}
fn ten() -> f64 {
    10.0
}
fn f045() -> f64 {
    0.45
}
fn f010() -> f64 {
    0.10
}
fn f080() -> f64 {
    0.80
}

/// Momentum range cycled against the learning rate by one-cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentumRange {
    pub max: f64,
    pub min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Constant {
        lr: f64,
    },
    /// `lrs[i]` applies from `boundaries[i - 1]` (inclusive) onwards.
    Step {
        lrs: Vec<f64>,
        boundaries: Vec<u64>,
    },
    CosineDecay {
        seed_lr: f64,
        /// Defaults to the run length.
        #[serde(default)]
        total: Option<u64>,
        #[serde(default)]
        warmup_steps: u64,
    },
    LinearDecay {
        seed_lr: f64,
        #[serde(default)]
        total: Option<u64>,
        #[serde(default)]
        warmup_steps: u64,
    },
    InverseSqrt {
        peak_lr: f64,
        warmup_steps: u64,
        #[serde(default = "zero")]
        floor_lr: f64,
    },
    OneCycle {
        max_lr: f64,
        #[serde(default = "ten")]
        div_factor: f64,
        #[serde(default = "ten")]
        final_div: f64,
        #[serde(default = "f045")]
        up_frac: f64,
        #[serde(default = "f045")]
        down_frac: f64,
        #[serde(default = "f010")]
        final_frac: f64,
        #[serde(default)]
        momentum: Option<MomentumRange>,
    },
    Trapezoid {
        max_lr: f64,
        #[serde(default = "ten")]
        div_factor: f64,
        #[serde(default = "f010")]
        warm_frac: f64,
        #[serde(default = "f080")]
        flat_frac: f64,
        #[serde(default = "f010")]
        decay_frac: f64,
    },
}

impl ScheduleSpec {
    pub fn one_cycle(max_lr: f64) -> Self {
        ScheduleSpec::OneCycle {
            max_lr,
            div_factor: 10.0,
            final_div: 10.0,
            up_frac: 0.45,
            down_frac: 0.45,
            final_frac: 0.10,
            momentum: None,
        }
    }

    pub fn trapezoid(max_lr: f64) -> Self {
        ScheduleSpec::Trapezoid { max_lr, div_factor: 10.0, warm_frac: 0.1, flat_frac: 0.8, decay_frac: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        let fractions = |fs: &[f64]| {
            if fs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                Err(Error::Config(format!("schedule fractions {fs:?} must lie in [0, 1] and sum to 1")))
            } else {
                Ok(())
            }
        };
        match self {
            ScheduleSpec::Constant { lr } => positive("lr", *lr),
            ScheduleSpec::Step { lrs, boundaries } => {
                if lrs.len() != boundaries.len() + 1 {
                    return Err(Error::Config(format!(
                        "step schedule needs one more lr than boundaries ({} lrs, {} boundaries)",
                        lrs.len(),
                        boundaries.len()
                    )));
                }
                if boundaries.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config("step boundaries must be strictly increasing".into()));
                }
                lrs.iter().try_for_each(|&v| positive("lr", v))
            }
            ScheduleSpec::CosineDecay { seed_lr, total, warmup_steps }
            | ScheduleSpec::LinearDecay { seed_lr, total, warmup_steps } => {
                positive("seed_lr", *seed_lr)?;
                if let Some(t) = total {
                    if *warmup_steps >= *t {
                        return Err(Error::Config("warmup_steps must be below total".into()));
                    }
                }
                Ok(())
            }
            ScheduleSpec::InverseSqrt { peak_lr, warmup_steps, floor_lr } => {
                positive("peak_lr", *peak_lr)?;
                if *warmup_steps == 0 {
                    return Err(Error::Config("inverse_sqrt needs warmup_steps >= 1".into()));
                }
                if !(*floor_lr >= 0.0) {
                    return Err(Error::Config("floor_lr must be non-negative".into()));
                }
                Ok(())
            }
            ScheduleSpec::OneCycle { max_lr, div_factor, final_div, up_frac, down_frac, final_frac, momentum } => {
                positive("max_lr", *max_lr)?;
                positive("div_factor", *div_factor)?;
                positive("final_div", *final_div)?;
                if let Some(m) = momentum {
                    if !(0.0 <= m.min && m.min <= m.max && m.max < 1.0) {
                        return Err(Error::Config("momentum range needs 0 <= min <= max < 1".into()));
                    }
                }
                fractions(&[*up_frac, *down_frac, *final_frac])
            }
            ScheduleSpec::Trapezoid { max_lr, div_factor, warm_frac, flat_frac, decay_frac } => {
                positive("max_lr", *max_lr)?;
                positive("div_factor", *div_factor)?;
                fractions(&[*warm_frac, *flat_frac, *decay_frac])
            }
        }
    }

    /// Learning rate used by the first step.
    pub fn initial_lr(&self, total_steps: u64) -> Result<f64> {
        lr_at(self, 0, total_steps)
    }
}

/// Linear interpolation from `a` at `x0` to `b` at `x1`.
fn lerp(a: f64, b: f64, x0: f64, x1: f64, x: f64) -> f64 {
    if x1 <= x0 {
        return b;
    }
    a + (b - a) * (x - x0) / (x1 - x0)
}

/// Linear warmup reaching `peak` at step `warmup`.
fn warmup(peak: f64, step: u64, warmup: u64) -> f64 {
    peak * (step + 1) as f64 / (warmup + 1) as f64
}

pub fn lr_at(spec: &ScheduleSpec, step: u64, total_steps: u64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::invalid(format!("step {step} outside schedule of {total_steps} steps")));
    }
    let x = step as f64 / total_steps as f64;
    let lr = match spec {
        ScheduleSpec::Constant { lr } => *lr,
        ScheduleSpec::Step { lrs, boundaries } => {
            let i = boundaries.iter().take_while(|&&b| step >= b).count();
            lrs[i]
        }
        ScheduleSpec::CosineDecay { seed_lr, total, warmup_steps } => {
            let t = total.unwrap_or(total_steps);
            if step < *warmup_steps {
                warmup(*seed_lr, step, *warmup_steps)
            } else if step >= t {
                0.0
            } else {
                let p = (step - warmup_steps) as f64 / (t - warmup_steps) as f64;
                seed_lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
        ScheduleSpec::LinearDecay { seed_lr, total, warmup_steps } => {
            let t = total.unwrap_or(total_steps);
            if step < *warmup_steps {
                warmup(*seed_lr, step, *warmup_steps)
            } else if step >= t {
                0.0
            } else {
                let p = (step - warmup_steps) as f64 / (t - warmup_steps) as f64;
                seed_lr * (1.0 - p)
            }
        }
        ScheduleSpec::InverseSqrt { peak_lr, warmup_steps, floor_lr } => {
            if step < *warmup_steps {
                warmup(*peak_lr, step, *warmup_steps)
            } else {
                (peak_lr * (*warmup_steps as f64 / step as f64).sqrt()).max(*floor_lr)
            }
        }
        ScheduleSpec::OneCycle { max_lr, div_factor, final_div, up_frac, down_frac, .. } => {
            let low = max_lr / div_factor;
            let up = *up_frac;
            let down = up + down_frac;
            if x < up {
                lerp(low, *max_lr, 0.0, up, x)
            } else if x < down {
                lerp(*max_lr, low, up, down, x)
            } else {
                lerp(low, low / final_div, down, 1.0, x)
            }
        }
        ScheduleSpec::Trapezoid { max_lr, div_factor, warm_frac, flat_frac, .. } => {
            let warm = *warm_frac;
            let flat = warm + flat_frac;
            if x < warm {
                lerp(max_lr / div_factor, *max_lr, 0.0, warm, x)
            } else if x < flat {
                *max_lr
            } else {
                lerp(*max_lr, 0.0, flat, 1.0, x)
            }
        }
    };
    Ok(lr)
}

/// Momentum for schedules that cycle it; `None` leaves the optimizer alone.
pub fn momentum_at(spec: &ScheduleSpec, step: u64, total_steps: u64) -> Option<f64> {
    let ScheduleSpec::OneCycle { up_frac, down_frac, momentum: Some(m), .. } = spec else {
        return None;
    };
    let x = step as f64 / total_steps.max(1) as f64;
    let down = up_frac + down_frac;
    Some(if x < *up_frac {
        lerp(m.max, m.min, 0.0, *up_frac, x)
    } else if x < down {
        lerp(m.min, m.max, *up_frac, down, x)
    } else {
        m.max
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeTestConfig {
    pub beta: f64,
    /// Stop once the smoothed loss exceeds this multiple of the best so far.
    pub explode_factor: f64,
    pub div: f64,
}

impl Default for RangeTestConfig {
    fn default() -> Self {
        Self { beta: 0.98, explode_factor: 4.0, div: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangePoint {
    pub lr: f64,
    pub loss: f64,
    pub smoothed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeTestResult {
    pub curve: Vec<RangePoint>,
    /// Learning rate at the minimum smoothed loss.
    pub min_lr: f64,
    /// Learning rate at which the loss was judged to explode, if it did.
    pub explosion_lr: Option<f64>,
    pub suggested_max_lr: f64,
}

/// Trains with an exponentially increasing learning rate and records the
/// smoothed minibatch loss. Each recorded loss is taken before the update
/// made at that learning rate.
pub fn lr_range_test(
    engine: &mut Engine,
    optimizer: &mut Optimizer,
    lr_min: f64,
    lr_max: f64,
    steps: usize,
    cfg: RangeTestConfig,
) -> Result<RangeTestResult> {
    if !(lr_min > 0.0 && lr_min < lr_max && lr_max.is_finite()) {
        return Err(Error::invalid(format!("need 0 < lr_min < lr_max, got {lr_min}, {lr_max}")));
    }
    if steps < 2 {
        return Err(Error::invalid("range test needs at least 2 steps"));
    }
    let ratio = lr_max / lr_min;
    let mut smoother = ExpSmoother::new(cfg.beta);
    let mut curve = Vec::with_capacity(steps);
    let mut best = f64::INFINITY;
    let mut best_lr = lr_min;
    let mut explosion_lr = None;
    for i in 0..steps {
        let lr = lr_min * ratio.powf(i as f64 / (steps - 1) as f64);
        let rows = engine.next_minibatch();
        let (loss, grads) = engine.backward(&rows)?;
        let smoothed = if loss.is_finite() { smoother.push(loss) } else { f64::INFINITY };
        curve.push(RangePoint { lr, loss, smoothed });
        if smoothed > cfg.explode_factor * best || !smoothed.is_finite() {
            if i <= 1 {
                return Err(Error::Range { lr: lr_min });
            }
            explosion_lr = Some(lr);
            break;
        }
        if smoothed < best {
            best = smoothed;
            best_lr = lr;
        }
        let (d, pending) = optimizer.compute_direction(engine.params(), &grads)?;
        optimizer.commit_step(engine.params_mut(), &d, lr, pending)?;
    }
    Ok(RangeTestResult { curve, min_lr: best_lr, explosion_lr, suggested_max_lr: best_lr / cfg.div })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1e-300) || (a - b).abs() < 1e-15
    }

    #[test]
    fn cosine_examples() {
        let s = ScheduleSpec::CosineDecay { seed_lr: 0.1, total: None, warmup_steps: 0 };
        assert_eq!(lr_at(&s, 0, 1000).unwrap(), 0.1);
        assert!(close(lr_at(&s, 500, 1000).unwrap(), 0.05));
        assert!(lr_at(&s, 999, 1000).unwrap() < 1e-6);
    }

    #[test]
    fn step_examples() {
        let s = ScheduleSpec::Step { lrs: vec![0.1, 0.01, 0.001], boundaries: vec![30, 60] };
        assert_eq!(lr_at(&s, 45, 90).unwrap(), 0.01);
        assert_eq!(lr_at(&s, 29, 90).unwrap(), 0.1);
        assert_eq!(lr_at(&s, 30, 90).unwrap(), 0.01);
        assert_eq!(lr_at(&s, 60, 90).unwrap(), 0.001);
    }

    #[test]
    fn inverse_sqrt_examples() {
        let s = ScheduleSpec::InverseSqrt { peak_lr: 5e-4, warmup_steps: 4000, floor_lr: 0.0 };
        assert!(close(lr_at(&s, 16000, 20000).unwrap(), 2.5e-4));
        assert_eq!(lr_at(&s, 4000, 20000).unwrap(), 5e-4);
        assert!(lr_at(&s, 0, 20000).unwrap() < 1e-6);
    }

    #[test]
    fn out_of_range_step() {
        let s = ScheduleSpec::Constant { lr: 0.1 };
        assert!(matches!(lr_at(&s, 10, 10), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn one_cycle_momentum() {
        let mut s = ScheduleSpec::one_cycle(1.0);
        if let ScheduleSpec::OneCycle { momentum, .. } = &mut s {
            *momentum = Some(MomentumRange { max: 0.95, min: 0.85 });
        }
        assert_eq!(momentum_at(&s, 0, 100), Some(0.95));
        assert!((momentum_at(&s, 45, 100).unwrap() - 0.85).abs() < 1e-12);
        assert_eq!(momentum_at(&s, 95, 100), Some(0.95));
        assert_eq!(momentum_at(&ScheduleSpec::one_cycle(1.0), 10, 100), None);
    }

    #[test]
    fn validation() {
        assert!(ScheduleSpec::Step { lrs: vec![0.1, 0.01], boundaries: vec![5, 5] }.validate().is_err());
        assert!(ScheduleSpec::Step { lrs: vec![0.1], boundaries: vec![5] }.validate().is_err());
        let mut oc = ScheduleSpec::one_cycle(1.0);
        if let ScheduleSpec::OneCycle { final_frac, .. } = &mut oc {
            *final_frac = 0.2;
        }
        assert!(oc.validate().is_err());
        assert!(ScheduleSpec::trapezoid(0.5).validate().is_ok());
    }

    #[test]
    fn parses_from_json() {
        let s: ScheduleSpec = serde_json::from_str(r#"{"kind":"one_cycle","max_lr":0.5}"#).unwrap();
        assert_eq!(s, ScheduleSpec::one_cycle(0.5));
        assert!(serde_json::from_str::<ScheduleSpec>(r#"{"kind":"constant","lr":0.1,"x":1}"#).is_err());
    }
}
