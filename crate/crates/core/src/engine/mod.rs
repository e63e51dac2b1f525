//! Deterministic training substrate.
//!
//! An [`Engine`] owns the parameters, the data, the minibatch order and the
//! superbatch sampler for one run. Every loss evaluation made on behalf of
//! training or tuning goes through it, so it can count forward passes.

pub mod data;
pub mod idx;
pub mod model;
pub mod rng;

use rand::seq::index;
use rand::seq::SliceRandom;

pub use data::{make_dataset, DataSource, Dataset, DatasetSpec, QuadraticBowl, Split, Targets};
pub use idx::load_idx;
pub use model::{LossKind, Model, ModelKind, ModelSpec};
pub use rng::{RngPosition, RngStream, StreamPurpose};

use crate::error::{Error, Result};
use crate::optim::{Direction, ParamVector};

/// What the parameters are trained against.
#[derive(Debug, Clone)]
pub enum Objective {
    Supervised { model: Model, train: Dataset, test: Dataset },
    Bowl(QuadraticBowl),
}

impl Objective {
    fn train_len(&self) -> usize {
        match self {
            Objective::Supervised { train, .. } => train.len(),
            Objective::Bowl(b) => b.examples(),
        }
    }

    fn num_params(&self) -> usize {
        match self {
            Objective::Supervised { model, .. } => model.num_params(),
            Objective::Bowl(b) => b.dim,
        }
    }

    fn batch_loss(&self, params: &[f64], rows: &[usize]) -> Result<f64> {
        match self {
            Objective::Supervised { model, train, .. } => model.loss(params, train, rows),
            Objective::Bowl(b) => {
                if rows.is_empty() {
                    return Err(Error::InvalidInput("empty batch".into()));
                }
                Ok(b.batch_loss(params, rows))
            }
        }
    }

    fn batch_loss_and_grad(&self, params: &[f64], rows: &[usize]) -> Result<(f64, Vec<f64>)> {
        match self {
            Objective::Supervised { model, train, .. } => model.loss_and_grad(params, train, rows),
            Objective::Bowl(b) => {
                if rows.is_empty() {
                    return Err(Error::InvalidInput("empty batch".into()));
                }
                Ok((b.batch_loss(params, rows), b.batch_gradient(params, rows)))
            }
        }
    }
}

/// A set of minibatches (by index into the fixed superbatch partition)
/// whose losses are averaged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Superbatch {
    pub minibatch_indices: Vec<usize>,
}

impl Superbatch {
    pub fn size_in_minibatches(&self) -> usize {
        self.minibatch_indices.len()
    }
}

/// Position of the training data stream; restoring it replays the same
/// minibatch sequence and the same superbatch draws.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamCursor {
    shuffle: RngPosition,
    superbatch: RngPosition,
    order: Vec<usize>,
    next: usize,
    epoch: u64,
}

impl StreamCursor {
    pub fn superbatch_position(&self) -> RngPosition {
        self.superbatch
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostCounters {
    pub forward_passes: u64,
    pub backward_passes: u64,
}

#[derive(Debug, Clone)]
pub struct Engine {
    objective: Objective,
    params: ParamVector,
    batch_size: usize,
    /// Fixed row permutation defining the minibatches superbatches draw from.
    partition: Vec<usize>,
    shuffle: RngStream,
    superbatch_rng: RngStream,
    order: Vec<usize>,
    next: usize,
    epoch: u64,
    counters: CostCounters,
}

impl Engine {
    pub fn new(objective: Objective, params: ParamVector, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if params.len() != objective.num_params() {
            return Err(Error::InvalidInput(format!(
                "objective has {} parameters, got {}",
                objective.num_params(),
                params.len()
            )));
        }
        let n = objective.train_len();
        if n < batch_size {
            return Err(Error::invalid(format!("batch size {batch_size} exceeds {n} training examples")));
        }
        let mut superbatch_rng = RngStream::new(seed, StreamPurpose::Superbatch);
        let mut partition: Vec<usize> = (0..n).collect();
        partition.shuffle(superbatch_rng.rng());
        Ok(Self {
            objective,
            params,
            batch_size,
            partition,
            shuffle: RngStream::new(seed, StreamPurpose::Shuffle),
            superbatch_rng,
            order: Vec::new(),
            next: 0,
            epoch: 0,
            counters: CostCounters::default(),
        })
    }

    /// Builds the objective from materialized data and initializes parameters
    /// from the run seed.
    pub fn from_source(source: DataSource, model: Option<&ModelSpec>, batch_size: usize, seed: u64) -> Result<Self> {
        let (objective, params) = match source {
            DataSource::Bowl(bowl) => {
                let init = bowl.init.clone();
                (Objective::Bowl(bowl), init)
            }
            DataSource::Supervised { train, test } => {
                let spec = model.ok_or_else(|| Error::Config("supervised data needs a model".into()))?;
                let model = Model::for_data(spec, &train)?;
                let params = model.init_params(&mut RngStream::new(seed, StreamPurpose::Init));
                (Objective::Supervised { model, train, test }, params)
            }
        };
        Engine::new(objective, ParamVector(params), batch_size, seed)
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::IncompatibleSnapshot { expected: self.params.len(), found: params.len() });
        }
        self.params = params;
        Ok(())
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Full minibatches per epoch; a trailing partial batch is dropped.
    pub fn num_minibatches(&self) -> usize {
        self.objective.train_len() / self.batch_size
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn counters(&self) -> CostCounters {
        self.counters
    }

    /// Rows of the next training minibatch, reshuffling at epoch boundaries.
    pub fn next_minibatch(&mut self) -> Vec<usize> {
        if self.order.is_empty() || self.next + self.batch_size > self.order.len() {
            if !self.order.is_empty() {
                self.epoch += 1;
            }
            self.order = (0..self.objective.train_len()).collect();
            self.order.shuffle(self.shuffle.rng());
            self.next = 0;
        }
        let rows = self.order[self.next..self.next + self.batch_size].to_vec();
        self.next += self.batch_size;
        rows
    }

    /// Rows of minibatch `i` of the fixed superbatch partition.
    pub fn partition_minibatch(&self, i: usize) -> &[usize] {
        &self.partition[i * self.batch_size..(i + 1) * self.batch_size]
    }

    /// Mean loss on a batch at the current parameters. Counts one forward pass.
    pub fn forward_loss(&mut self, rows: &[usize]) -> Result<f64> {
        let loss = self.objective.batch_loss(&self.params, rows)?;
        self.counters.forward_passes += 1;
        Ok(loss)
    }

    /// Mean loss and exact gradient on a batch at the current parameters.
    pub fn backward(&mut self, rows: &[usize]) -> Result<(f64, Vec<f64>)> {
        let out = self.objective.batch_loss_and_grad(&self.params, rows)?;
        self.counters.backward_passes += 1;
        Ok(out)
    }

    /// Samples `size` distinct minibatches from the superbatch stream.
    pub fn draw_superbatch(&mut self, size: usize) -> Result<Superbatch> {
        let available = self.num_minibatches();
        if size == 0 || size > available {
            return Err(Error::invalid(format!(
                "superbatch of {size} minibatches needs 1..={available} (batch size {})",
                self.batch_size
            )));
        }
        let mut minibatch_indices = index::sample(self.superbatch_rng.rng(), available, size).into_vec();
        minibatch_indices.sort_unstable();
        Ok(Superbatch { minibatch_indices })
    }

    /// Every minibatch of the partition, i.e. one full epoch.
    pub fn full_superbatch(&self) -> Superbatch {
        Superbatch { minibatch_indices: (0..self.num_minibatches()).collect() }
    }

    fn superbatch_loss_at(&mut self, params: &[f64], sb: &Superbatch) -> Result<f64> {
        if sb.minibatch_indices.is_empty() {
            return Err(Error::invalid("empty superbatch"));
        }
        let available = self.num_minibatches();
        let mut total = 0.0;
        for &i in &sb.minibatch_indices {
            if i >= available {
                return Err(Error::invalid(format!("minibatch index {i} out of range ({available})")));
            }
            let rows = &self.partition[i * self.batch_size..(i + 1) * self.batch_size];
            total += self.objective.batch_loss(params, rows)?;
        }
        self.counters.forward_passes += sb.minibatch_indices.len() as u64;
        Ok(total / sb.minibatch_indices.len() as f64)
    }

    /// Unweighted mean of minibatch losses over the superbatch.
    pub fn superbatch_loss(&mut self, sb: &Superbatch) -> Result<f64> {
        let params = std::mem::take(&mut self.params);
        let out = self.superbatch_loss_at(&params, sb);
        self.params = params;
        out
    }

    /// Superbatch loss at `theta - step_size * d`. The stored parameters are
    /// never written. Returns NaN when the perturbed point is not finite.
    pub fn perturbed_loss(&mut self, d: &Direction, step_size: f64, sb: &Superbatch) -> Result<f64> {
        if d.len() != self.params.len() {
            return Err(Error::InvalidInput(format!(
                "direction has {} entries, parameters have {}",
                d.len(),
                self.params.len()
            )));
        }
        let shifted: Vec<f64> = self.params.iter().zip(d.iter()).map(|(p, di)| p - step_size * di).collect();
        if shifted.iter().any(|v| !v.is_finite()) {
            return Ok(f64::NAN);
        }
        self.superbatch_loss_at(&shifted, sb)
    }

    /// Mean loss over every training example. Not counted as training cost.
    pub fn train_loss(&self) -> Result<f64> {
        match &self.objective {
            Objective::Supervised { model, train, .. } => Ok(model.evaluate(&self.params, train)?.0),
            Objective::Bowl(b) => {
                let rows: Vec<usize> = (0..b.examples()).collect();
                Ok(b.batch_loss(&self.params, &rows))
            }
        }
    }

    /// Held-out loss and accuracy. For the bowl this is the exact objective.
    pub fn evaluate_test(&self) -> Result<(f64, Option<f64>)> {
        match &self.objective {
            Objective::Supervised { model, test, .. } => {
                if test.is_empty() {
                    return Ok((f64::NAN, None));
                }
                model.evaluate(&self.params, test)
            }
            Objective::Bowl(b) => Ok((b.objective(&self.params), None)),
        }
    }

    pub fn cursor(&self) -> StreamCursor {
        StreamCursor {
            shuffle: self.shuffle.position(),
            superbatch: self.superbatch_rng.position(),
            order: self.order.clone(),
            next: self.next,
            epoch: self.epoch,
        }
    }

    pub fn restore_cursor(&mut self, cursor: &StreamCursor) {
        self.shuffle.seek(cursor.shuffle);
        self.superbatch_rng.seek(cursor.superbatch);
        self.order = cursor.order.clone();
        self.next = cursor.next;
        self.epoch = cursor.epoch;
    }

    pub(crate) fn seek_superbatch(&mut self, pos: RngPosition) {
        self.superbatch_rng.seek(pos);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_engine(batch: usize) -> Engine {
        let spec = DatasetSpec::Blobs { n: 200, k: 3, dim: 2, separation: 1.0, sigma: 1.0, test_fraction: 0.2 };
        let source = make_dataset(&spec, 5).unwrap();
        Engine::from_source(source, Some(&ModelSpec::Mlp { hidden: vec![6] }), batch, 5).unwrap()
    }

    fn bowl_engine() -> Engine {
        let bowl = QuadraticBowl::diagonal(&[1.0, 10.0], &[1.0, 1.0]).unwrap();
        Engine::new(Objective::Bowl(bowl), ParamVector(vec![1.0, 1.0]), 1, 0).unwrap()
    }

    #[test]
    fn superbatch_of_one_equals_forward_loss() {
        let mut e = blob_engine(16);
        let sb = Superbatch { minibatch_indices: vec![3] };
        let rows = e.partition_minibatch(3).to_vec();
        assert_eq!(e.superbatch_loss(&sb).unwrap(), e.forward_loss(&rows).unwrap());
    }

    #[test]
    fn superbatch_is_mean_of_minibatches() {
        let mut e = blob_engine(16);
        let a = e.forward_loss(&e.partition_minibatch(0).to_vec()).unwrap();
        let b = e.forward_loss(&e.partition_minibatch(1).to_vec()).unwrap();
        let sb = Superbatch { minibatch_indices: vec![0, 1] };
        assert!((e.superbatch_loss(&sb).unwrap() - (a + b) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn full_superbatch_equals_epoch_mean() {
        // 160 training rows, batch 16: no partial batch
        let mut e = blob_engine(16);
        let sb = e.full_superbatch();
        let full = e.superbatch_loss(&sb).unwrap();
        assert!((full - e.train_loss().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn superbatch_cost_counter() {
        let mut e = blob_engine(16);
        let sb = e.draw_superbatch(5).unwrap();
        let before = e.counters().forward_passes;
        e.superbatch_loss(&sb).unwrap();
        assert_eq!(e.counters().forward_passes - before, 5);
        assert!(e.superbatch_loss(&Superbatch { minibatch_indices: vec![] }).is_err());
        assert!(e.draw_superbatch(11).is_err());
    }

    #[test]
    fn perturbed_loss_on_bowl() {
        let mut e = bowl_engine();
        let sb = e.draw_superbatch(1).unwrap();
        let g = Direction(vec![1.0, 10.0]);
        assert_eq!(e.perturbed_loss(&g, 0.0, &sb).unwrap(), e.superbatch_loss(&sb).unwrap());
        let t = 0.05;
        // theta - t g = (0.95, 0.5); L = 0.5 (0.9025 + 10 * 0.25)
        let want = 0.5 * (0.95f64.powi(2) + 10.0 * 0.5f64.powi(2));
        assert!((e.perturbed_loss(&g, t, &sb).unwrap() - want).abs() < 1e-15);
        assert_eq!(e.params().0, vec![1.0, 1.0]);
        let huge = Direction(vec![f64::MAX, 0.0]);
        assert!(e.perturbed_loss(&huge, -4.0, &sb).unwrap().is_nan());
    }

    #[test]
    fn cursor_replays_minibatches() {
        let mut e = blob_engine(32);
        e.next_minibatch();
        let c = e.cursor();
        let a: Vec<_> = (0..12).map(|_| e.next_minibatch()).collect();
        e.restore_cursor(&c);
        let b: Vec<_> = (0..12).map(|_| e.next_minibatch()).collect();
        assert_eq!(a, b);
        assert!(e.epoch() >= 2);
    }
}
