//! Subcommand implementations. Each takes a parsed config and an output
//! directory and returns what it wrote, so tests can call them directly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{LrPolicyConfig, RunConfig};
use super::record::{write_table, TraceWriter};
use crate::engine::{make_dataset, Engine};
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::quadprobe::{self, LossSample, QuadFit};
use crate::schedules::{self, RangeTestConfig, RangeTestResult};
use crate::session::{Policy, Session};
use crate::stats::{summarize, SummaryStats};
use crate::tuner::{LrTuner, TunerConfig, TunerCounters};

pub fn build_engine(cfg: &RunConfig, seed: u64) -> Result<Engine> {
    let source = make_dataset(&cfg.dataset, seed)?;
    Engine::from_source(source, cfg.model.as_ref(), cfg.batch_size, seed)
}

pub fn build_session(cfg: &RunConfig, seed: u64) -> Result<Session> {
    let engine = build_engine(cfg, seed)?;
    let steps_per_epoch = engine.num_minibatches() as u64;
    let total = cfg.epochs * steps_per_epoch;
    let optimizer = Optimizer::new(&cfg.optimizer, engine.params().len())?;
    let policy = match &cfg.lr_policy {
        LrPolicyConfig::Tuner(t) => Policy::Tuner(LrTuner::new(t.resolve(steps_per_epoch, total)?)?),
        LrPolicyConfig::Schedule(s) => Policy::Schedule(s.clone()),
    };
    Session::new(engine, optimizer, policy, total, cfg.eval_every.unwrap_or(steps_per_epoch))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub steps: u64,
    /// Mean loss over the whole training split at the end.
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub final_test_acc: Option<f64>,
    pub best_test_acc: Option<f64>,
    pub final_lr: f64,
    pub forward_passes: u64,
    pub backward_passes: u64,
    pub tuner: Option<TunerCounters>,
    /// Number of trace rows per event tag.
    pub events: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub runs: Vec<RunSummary>,
    /// Mean and population standard deviation across seeds.
    pub aggregate: BTreeMap<String, SummaryStats>,
}

fn aggregate(runs: &[RunSummary]) -> Result<BTreeMap<String, SummaryStats>> {
    let mut out = BTreeMap::new();
    let mut add = |name: &str, vals: Vec<f64>| -> Result<()> {
        if !vals.is_empty() {
            out.insert(name.to_string(), summarize(&vals)?);
        }
        Ok(())
    };
    add("final_train_loss", runs.iter().map(|r| r.final_train_loss).collect())?;
    add("final_test_loss", runs.iter().map(|r| r.final_test_loss).collect())?;
    add("final_test_acc", runs.iter().filter_map(|r| r.final_test_acc).collect())?;
    add("best_test_acc", runs.iter().filter_map(|r| r.best_test_acc).collect())?;
    add("final_lr", runs.iter().map(|r| r.final_lr).collect())?;
    Ok(out)
}

/// Trains one seed, optionally writing its trace.
pub fn train_one(cfg: &RunConfig, seed: u64, trace: Option<&Path>) -> Result<RunSummary> {
    let mut session = build_session(cfg, seed)?;
    let mut writer = trace.map(TraceWriter::create).transpose()?;
    let mut events: BTreeMap<String, u64> = BTreeMap::new();
    let mut best_acc: Option<f64> = None;
    let mut last_test = (f64::NAN, None);
    let mut last_lr = f64::NAN;
    session.run(|r| {
        if let Some(w) = writer.as_mut() {
            w.write(r)?;
        }
        *events.entry(r.event.tag().to_string()).or_default() += 1;
        if let Some(l) = r.test_loss {
            last_test = (l, r.test_acc);
        }
        if let Some(a) = r.test_acc {
            best_acc = Some(best_acc.map_or(a, |b: f64| b.max(a)));
        }
        last_lr = r.lr;
        Ok(())
    })?;
    if let Some(w) = writer {
        w.finish()?;
    }
    let counters = session.engine().counters();
    Ok(RunSummary {
        seed,
        steps: session.total_steps(),
        final_train_loss: session.engine().train_loss()?,
        final_test_loss: last_test.0,
        final_test_acc: last_test.1,
        best_test_acc: best_acc,
        final_lr: last_lr,
        forward_passes: counters.forward_passes,
        backward_passes: counters.backward_passes,
        tuner: session.tuner_counters(),
        events,
    })
}

pub fn trace_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("trace_seed{seed}.csv"))
}

/// Runs every seed (concurrently), writing `trace_seed{N}.csv` and `summary.json`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    fs::create_dir_all(out)?;
    let runs = cfg
        .seeds
        .par_iter()
        .map(|&seed| train_one(cfg, seed, Some(&trace_path(out, seed))))
        .collect::<Result<Vec<_>>>()?;
    let summary = TrainSummary { aggregate: aggregate(&runs)?, runs };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(out.join("summary.json"), json)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean: f64,
    pub stddev: f64,
}

/// Final test accuracy, or final test loss when the task has no accuracy.
fn sweep_metric(r: &RunSummary) -> f64 {
    r.final_test_acc.unwrap_or(r.final_test_loss)
}

/// One sub-run per seed learning rate per seed; writes `sweep.csv`
/// (value, mean, stddev of the final metric) and per-value summaries.
pub fn cmd_sweep(cfg: &RunConfig, values: &[f64], out: &Path) -> Result<Vec<SweepRow>> {
    if values.is_empty() || values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Config(format!("sweep values must be positive, got {values:?}")));
    }
    fs::create_dir_all(out)?;
    let jobs: Vec<(usize, u64)> =
        (0..values.len()).flat_map(|i| cfg.seeds.iter().map(move |&s| (i, s))).collect();
    let results = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let mut sub = cfg.clone();
            sub.lr_policy.set_seed_lr(values[i]);
            let dir = out.join(format!("value{i}"));
            fs::create_dir_all(&dir)?;
            train_one(&sub, seed, Some(&trace_path(&dir, seed)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(values.len());
    let mut per_value = Vec::with_capacity(values.len());
    for (i, &value) in values.iter().enumerate() {
        let runs: Vec<RunSummary> =
            jobs.iter().zip(&results).filter(|((j, _), _)| *j == i).map(|(_, r)| r.clone()).collect();
        let metric: Vec<f64> = runs.iter().map(sweep_metric).collect();
        let s = summarize(&metric)?;
        rows.push(SweepRow { value, mean: s.mean, stddev: s.stddev });
        per_value.push(TrainSummary { aggregate: aggregate(&runs)?, runs });
    }
    let table: Vec<Vec<String>> =
        rows.iter().map(|r| vec![r.value.to_string(), r.mean.to_string(), r.stddev.to_string()]).collect();
    write_table(out.join("sweep.csv"), &["value", "mean", "stddev"], &table)?;
    let json = serde_json::to_string_pretty(&per_value).expect("summary serializes");
    fs::write(out.join("sweep_summary.json"), json)?;
    Ok(rows)
}

/// Range test on the first seed; writes `range_test.csv`.
pub fn cmd_range_test(cfg: &RunConfig, lr_min: f64, lr_max: f64, steps: usize, out: &Path) -> Result<RangeTestResult> {
    let seed = cfg.seeds[0];
    let mut engine = build_engine(cfg, seed)?;
    let mut optimizer = Optimizer::new(&cfg.optimizer, engine.params().len())?;
    let result = schedules::lr_range_test(&mut engine, &mut optimizer, lr_min, lr_max, steps, RangeTestConfig::default())?;
    fs::create_dir_all(out)?;
    let rows: Vec<Vec<String>> = result
        .curve
        .iter()
        .map(|p| vec![p.lr.to_string(), p.loss.to_string(), p.smoothed.to_string()])
        .collect();
    write_table(out.join("range_test.csv"), &["lr", "loss", "smoothed_loss"], &rows)?;
    Ok(result)
}

/// Standard deviation of the superbatch loss across `trials` independently
/// drawn superbatches, at the initial parameters of the first seed.
pub fn cmd_sb_scan(cfg: &RunConfig, sizes: &[usize], trials: usize, out: &Path) -> Result<Vec<(usize, f64)>> {
    if sizes.is_empty() || sizes.contains(&0) || trials == 0 {
        return Err(Error::invalid("sb-scan needs sizes >= 1 and at least one trial"));
    }
    let mut engine = build_engine(cfg, cfg.seeds[0])?;
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mut losses = Vec::with_capacity(trials);
        for _ in 0..trials {
            let sb = engine.draw_superbatch(size)?;
            losses.push(engine.superbatch_loss(&sb)?);
        }
        rows.push((size, summarize(&losses)?.stddev));
    }
    fs::create_dir_all(out)?;
    let table: Vec<Vec<String>> = rows.iter().map(|(s, d)| vec![s.to_string(), d.to_string()]).collect();
    write_table(out.join("sb_scan.csv"), &["size", "stddev"], &table)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadcheckRow {
    pub epsilon: f64,
    pub measured: f64,
    pub fitted: f64,
    pub held_out: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadcheckReport {
    pub step: u64,
    pub eta: f64,
    pub bound: f64,
    pub k0: f64,
    pub k1: f64,
    pub k2: f64,
    pub rows: Vec<QuadcheckRow>,
    /// Fitted minimum (unclamped), when the fit has one.
    pub epsilon_min: Option<f64>,
    pub fitted_at_min: Option<f64>,
    pub measured_at_min: Option<f64>,
}

/// Trains the first seed to `at_step`, then probes the loss along that
/// step's direction: the tuner's grid for the fit plus held-out points at
/// +-1.5 and +-2 times the bound. Writes `quadcheck.csv` and `quadcheck.json`.
pub fn cmd_quadcheck(cfg: &RunConfig, at_step: u64, out: &Path) -> Result<QuadcheckReport> {
    let mut session = build_session(cfg, cfg.seeds[0])?;
    if at_step >= session.total_steps() {
        return Err(Error::invalid(format!("at_step {at_step} beyond run of {} steps", session.total_steps())));
    }
    while session.step_index() < at_step {
        session.step()?;
    }
    let eta = session.current_lr()?;
    let tcfg = match session.policy() {
        Policy::Tuner(t) => t.config().clone(),
        Policy::Schedule(_) => TunerConfig::new(session.total_steps()),
    };
    let optimizer = session.optimizer().clone();
    let engine = session.engine_mut();
    let rows = engine.next_minibatch();
    let (_, grads) = engine.backward(&rows)?;
    let (d, _) = optimizer.compute_direction(engine.params(), &grads)?;
    let sb = engine.draw_superbatch(tcfg.superbatch_size.min(engine.num_minibatches()))?;

    let l0 = engine.perturbed_loss(&d, eta, &sb)?;
    let bound = quadprobe::epsilon_bound(tcfg.epsilon_threshold_r, l0.max(0.0))?;
    let grid = quadprobe::probe_points(eta, bound, tcfg.n_probes, tcfg.span_fraction)?;
    let mut samples = Vec::with_capacity(grid.len());
    for &e in &grid {
        samples.push(LossSample::new(e, engine.perturbed_loss(&d, eta + e, &sb)?));
    }
    let fit = quadprobe::fit_quadratic(&samples)?;
    let mut out_rows: Vec<QuadcheckRow> = samples
        .iter()
        .map(|s| QuadcheckRow { epsilon: s.epsilon, measured: s.loss, fitted: fit.eval(s.epsilon), held_out: false })
        .collect();
    for m in [-2.0, -1.5, 1.5, 2.0] {
        let e = m * bound;
        let measured = engine.perturbed_loss(&d, eta + e, &sb)?;
        out_rows.push(QuadcheckRow { epsilon: e, measured, fitted: fit.eval(e), held_out: true });
    }
    let eps_min = fitted_minimum(&fit);
    let measured_at_min = match eps_min {
        Some(e) => Some(engine.perturbed_loss(&d, eta + e, &sb)?),
        None => None,
    };
    let report = QuadcheckReport {
        step: at_step,
        eta,
        bound,
        k0: fit.k0,
        k1: fit.k1,
        k2: fit.k2,
        rows: out_rows,
        epsilon_min: eps_min,
        fitted_at_min: eps_min.map(|e| fit.eval(e)),
        measured_at_min,
    };

    fs::create_dir_all(out)?;
    let table: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![r.epsilon.to_string(), r.measured.to_string(), r.fitted.to_string(), u8::from(r.held_out).to_string()]
        })
        .collect();
    write_table(out.join("quadcheck.csv"), &["epsilon", "measured", "fitted", "held_out"], &table)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(out.join("quadcheck.json"), json)?;
    Ok(report)
}

fn fitted_minimum(fit: &QuadFit) -> Option<f64> {
    (fit.k2 > 0.0).then(|| -fit.k1 / (2.0 * fit.k2))
}
