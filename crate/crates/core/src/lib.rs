//! Automatic learning-rate tuning by local quadratic fits along the step
//! direction, with a small deterministic training engine for testing it.

pub mod cli;
pub mod engine;
pub mod error;
pub mod optim;
pub mod quadprobe;
pub mod schedules;
pub mod session;
pub mod stats;
pub mod tuner;

pub use error::{Error, Result};
pub use optim::{Direction, Optimizer, OptimizerSpec, ParamVector, Snapshot};
pub use quadprobe::{EpsilonProposal, LossSample, QuadFit};
pub use schedules::ScheduleSpec;
pub use tuner::{LrTuner, Phase, TunerConfig};
