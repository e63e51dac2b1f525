//! Command-line experiment runner.

pub mod commands;
pub mod config;
pub mod record;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_quadcheck, cmd_range_test, cmd_sb_scan, cmd_sweep, cmd_train, RunSummary, TrainSummary};
pub use config::{ExploreSpec, LrPolicyConfig, RunConfig, TunerSpec};

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "lrtuner", version, about = "Learning-rate tuning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run this seed only.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Only log warnings and errors.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every seed and write traces plus a summary.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Train once per seed learning rate.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Field to sweep; only `seed_lr` is supported.
        #[arg(long, default_value = "seed_lr")]
        field: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Exponential learning-rate ramp until the loss explodes.
    RangeTest {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        lr_min: f64,
        #[arg(long, default_value_t = 10.0)]
        lr_max: f64,
        #[arg(long, default_value_t = 200)]
        steps: usize,
    },
    /// Superbatch loss spread as a function of superbatch size.
    SbScan {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,4,16,64,100")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
    },
    /// Compare the quadratic fit with measured losses at one step.
    Quadcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        at_step: u64,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train { common }
            | Command::Sweep { common, .. }
            | Command::RangeTest { common, .. }
            | Command::SbScan { common, .. }
            | Command::Quadcheck { common, .. } => common,
        }
    }
}

fn load(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

/// Runs a parsed command; the returned text goes to standard output.
pub fn execute(cli: &Cli) -> Result<String> {
    let (cfg, out) = load(cli.command.common())?;
    match &cli.command {
        Command::Train { .. } => {
            let s = cmd_train(&cfg, &out)?;
            Ok(format!("wrote {} run(s) to {}", s.runs.len(), out.display()))
        }
        Command::Sweep { field, values, .. } => {
            if field != "seed_lr" {
                return Err(Error::Config(format!("cannot sweep field {field:?}; only seed_lr is supported")));
            }
            let rows = cmd_sweep(&cfg, values, &out)?;
            Ok(rows.iter().map(|r| format!("{},{},{}", r.value, r.mean, r.stddev)).collect::<Vec<_>>().join("\n"))
        }
        Command::RangeTest { lr_min, lr_max, steps, .. } => {
            let r = cmd_range_test(&cfg, *lr_min, *lr_max, *steps, &out)?;
            Ok(format!("suggested_max_lr {}", r.suggested_max_lr))
        }
        Command::SbScan { sizes, trials, .. } => {
            let rows = cmd_sb_scan(&cfg, sizes, *trials, &out)?;
            Ok(rows.iter().map(|(s, d)| format!("{s},{d}")).collect::<Vec<_>>().join("\n"))
        }
        Command::Quadcheck { at_step, .. } => {
            let r = cmd_quadcheck(&cfg, *at_step, &out)?;
            Ok(match r.epsilon_min {
                Some(e) => format!("fitted minimum at epsilon {e} (lr {})", r.eta + e),
                None => "fit has no minimum".to_string(),
            })
        }
    }
}

/// Parses arguments, runs, and maps the outcome to an exit status:
/// 0 on success, 1 on a config error, 2 on a runtime error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = if cli.command.common().quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli) {
        Ok(text) => {
            println!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                1
            } else {
                2
            }
        }
    }
}
