//! Run configuration, read from a JSON file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{DatasetSpec, ModelSpec};
use crate::error::{Error, Result};
use crate::optim::OptimizerSpec;
use crate::schedules::ScheduleSpec;
use crate::tuner::{ExploreBudget, TunerConfig};

/// Explore-phase length as written in a config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExploreSpec {
    Fraction(f64),
    Steps(u64),
    Epochs(f64),
}

fn default_explore() -> ExploreSpec {
    ExploreSpec::Fraction(0.25)
}

/// Tuner settings without the run length, which comes from `epochs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TunerSpec {
    pub seed_lr: f64,
    #[serde(default = "default_explore")]
    pub explore: ExploreSpec,
    /// Steps between recomputes; one epoch when omitted.
    #[serde(default)]
    pub recompute_window: Option<u64>,
    #[serde(default)]
    pub superbatch_size: Option<usize>,
    #[serde(default)]
    pub n_probes: Option<usize>,
    #[serde(default)]
    pub epsilon_threshold_r: Option<f64>,
    #[serde(default)]
    pub saturation_threshold_rel: Option<f64>,
    #[serde(default)]
    pub span_fraction: Option<f64>,
    #[serde(default)]
    pub rollback_enabled: Option<bool>,
    #[serde(default)]
    pub rollback_factor: Option<f64>,
}

impl TunerSpec {
    pub fn new(seed_lr: f64) -> Self {
        Self {
            seed_lr,
            explore: default_explore(),
            recompute_window: None,
            superbatch_size: None,
            n_probes: None,
            epsilon_threshold_r: None,
            saturation_threshold_rel: None,
            span_fraction: None,
            rollback_enabled: None,
            rollback_factor: None,
        }
    }

    pub fn resolve(&self, steps_per_epoch: u64, total_steps: u64) -> Result<TunerConfig> {
        let d = TunerConfig::new(total_steps);
        let explore = match self.explore {
            ExploreSpec::Fraction(f) => ExploreBudget::Fraction(f),
            ExploreSpec::Steps(s) => ExploreBudget::Steps(s),
            ExploreSpec::Epochs(e) => {
                if !(e >= 0.0) {
                    return Err(Error::Config(format!("explore epochs must be non-negative, got {e}")));
                }
                ExploreBudget::Steps((e * steps_per_epoch as f64).round() as u64)
            }
        };
        let cfg = TunerConfig {
            seed_lr: self.seed_lr,
            explore,
            total_steps,
            recompute_window: self.recompute_window.unwrap_or(steps_per_epoch),
            superbatch_size: self.superbatch_size.unwrap_or(d.superbatch_size),
            n_probes: self.n_probes.unwrap_or(d.n_probes),
            epsilon_threshold_r: self.epsilon_threshold_r.unwrap_or(d.epsilon_threshold_r),
            saturation_threshold_rel: self.saturation_threshold_rel.unwrap_or(d.saturation_threshold_rel),
            span_fraction: self.span_fraction.unwrap_or(d.span_fraction),
            rollback_enabled: self.rollback_enabled.unwrap_or(d.rollback_enabled),
            rollback_factor: self.rollback_factor.unwrap_or(d.rollback_factor),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrPolicyConfig {
    Tuner(TunerSpec),
    Schedule(ScheduleSpec),
}

impl LrPolicyConfig {
    /// Replaces the starting learning rate; for schedules this is the
    /// variant's headline rate (a step schedule is rescaled to start there).
    pub fn set_seed_lr(&mut self, value: f64) {
        match self {
            LrPolicyConfig::Tuner(t) => t.seed_lr = value,
            LrPolicyConfig::Schedule(s) => match s {
                ScheduleSpec::Constant { lr } => *lr = value,
                ScheduleSpec::Step { lrs, .. } => {
                    let scale = value / lrs[0];
                    lrs.iter_mut().for_each(|l| *l *= scale);
                }
                ScheduleSpec::CosineDecay { seed_lr, .. } | ScheduleSpec::LinearDecay { seed_lr, .. } => {
                    *seed_lr = value
                }
                ScheduleSpec::InverseSqrt { peak_lr, .. } => *peak_lr = value,
                ScheduleSpec::OneCycle { max_lr, .. } | ScheduleSpec::Trapezoid { max_lr, .. } => *max_lr = value,
            },
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    pub optimizer: OptimizerSpec,
    pub batch_size: usize,
    pub lr_policy: LrPolicyConfig,
    pub epochs: u64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Steps between test evaluations; once per epoch when omitted.
    #[serde(default)]
    pub eval_every: Option<u64>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.eval_every == Some(0) {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if let LrPolicyConfig::Schedule(s) = &self.lr_policy {
            s.validate()?;
        }
        Ok(())
    }
}
