//! Datasets and the synthetic generators used for desk-scale experiments.

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::rng::{RngStream, StreamPurpose};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, num_classes: usize },
    Real { values: Vec<f64>, dim: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Real { values, dim } => values.len() / dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Width of the model output needed for these targets.
    pub fn output_dim(&self) -> usize {
        match self {
            Targets::Classes { num_classes, .. } => *num_classes,
            Targets::Real { dim, .. } => *dim,
        }
    }
}

/// Row-major feature matrix plus targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub n_features: usize,
    pub targets: Targets,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Vec<f64>, n_features: usize, targets: Targets, split: Split) -> Result<Self> {
        if n_features == 0 || features.len() % n_features != 0 {
            return Err(Error::InvalidInput(format!(
                "feature buffer of length {} is not a multiple of {n_features}",
                features.len()
            )));
        }
        let rows = features.len() / n_features;
        if rows != targets.len() {
            return Err(Error::Consistency(format!("{rows} feature rows but {} targets", targets.len())));
        }
        if let Targets::Classes { labels, num_classes } = &targets {
            if let Some(bad) = labels.iter().find(|&&l| l >= *num_classes) {
                return Err(Error::InvalidInput(format!("label {bad} outside 0..{num_classes}")));
            }
        }
        Ok(Self { features, n_features, targets, split })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Copy of the given rows, in order.
    pub fn subset(&self, rows: &[usize], split: Split) -> Dataset {
        let mut features = Vec::with_capacity(rows.len() * self.n_features);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        let targets = match &self.targets {
            Targets::Classes { labels, num_classes } => Targets::Classes {
                labels: rows.iter().map(|&r| labels[r]).collect(),
                num_classes: *num_classes,
            },
            Targets::Real { values, dim } => Targets::Real {
                values: rows.iter().flat_map(|&r| values[r * dim..(r + 1) * dim].iter().copied()).collect(),
                dim: *dim,
            },
        };
        Dataset { features, n_features: self.n_features, targets, split }
    }
}

/// `L(theta) = mean_i 1/2 (theta - xi_i)^T A (theta - xi_i)` over per-example offsets.
///
/// With zero noise every offset is zero and the loss does not depend on the
/// batch at all.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticBowl {
    /// Symmetric positive semi-definite matrix, row-major `dim x dim`.
    pub matrix: Vec<f64>,
    pub dim: usize,
    /// Per-example offsets, row-major `examples x dim`.
    pub offsets: Vec<f64>,
    pub init: Vec<f64>,
}

impl QuadraticBowl {
    pub fn diagonal(diag: &[f64], init: &[f64]) -> Result<Self> {
        Self::with_noise(diag, init, 1, 0.0, 0)
    }

    pub fn with_noise(diag: &[f64], init: &[f64], examples: usize, noise: f64, seed: u64) -> Result<Self> {
        let dim = diag.len();
        if dim == 0 || examples == 0 {
            return Err(Error::invalid("quadratic bowl needs a non-empty diagonal and at least one example"));
        }
        if init.len() != dim {
            return Err(Error::invalid(format!("bowl init has {} entries, diagonal has {dim}", init.len())));
        }
        if diag.iter().any(|&d| !(d >= 0.0)) || !(noise >= 0.0) {
            return Err(Error::invalid("bowl diagonal and noise must be non-negative"));
        }
        let mut matrix = vec![0.0; dim * dim];
        for (i, &d) in diag.iter().enumerate() {
            matrix[i * dim + i] = d;
        }
        let mut offsets = vec![0.0; examples * dim];
        if noise > 0.0 {
            let mut rng = RngStream::new(seed, StreamPurpose::Noise);
            for o in offsets.iter_mut() {
                let z: f64 = rng.rng().sample(StandardNormal);
                *o = noise * z;
            }
        }
        Ok(Self { matrix, dim, offsets, init: init.to_vec() })
    }

    pub fn examples(&self) -> usize {
        self.offsets.len() / self.dim
    }

    fn a_times(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| self.matrix[i * self.dim..(i + 1) * self.dim].iter().zip(v).map(|(a, x)| a * x).sum())
            .collect()
    }

    /// Exact objective `1/2 theta^T A theta` (no offsets).
    pub fn objective(&self, theta: &[f64]) -> f64 {
        0.5 * theta.iter().zip(self.a_times(theta)).map(|(t, at)| t * at).sum::<f64>()
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        self.a_times(theta)
    }

    pub fn hessian_quadratic_form(&self, d: &[f64]) -> f64 {
        d.iter().zip(self.a_times(d)).map(|(x, ax)| x * ax).sum()
    }

    pub(crate) fn batch_loss(&self, theta: &[f64], rows: &[usize]) -> f64 {
        let mut diff = vec![0.0; self.dim];
        let total: f64 = rows
            .iter()
            .map(|&r| {
                for (k, d) in diff.iter_mut().enumerate() {
                    *d = theta[k] - self.offsets[r * self.dim + k];
                }
                self.objective(&diff)
            })
            .sum();
        total / rows.len() as f64
    }

    pub(crate) fn batch_gradient(&self, theta: &[f64], rows: &[usize]) -> Vec<f64> {
        let mut center = theta.to_vec();
        for &r in rows {
            for (k, c) in center.iter_mut().enumerate() {
                *c -= self.offsets[r * self.dim + k] / rows.len() as f64;
            }
        }
        self.a_times(&center)
    }
}

fn default_test_fraction() -> f64 {
    0.2
}
fn default_separation() -> f64 {
    5.0
}
fn default_sigma() -> f64 {
    1.0
}
fn default_dim() -> usize {
    2
}
fn default_moons_noise() -> f64 {
    0.1
}
fn default_bowl_examples() -> usize {
    1
}

/// Serializable description of where data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// `k` isotropic Gaussian classes with centers on a circle; adjacent
    /// centers sit `separation * sigma` apart.
    Blobs {
        n: usize,
        k: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    TwoMoons {
        n: usize,
        #[serde(default = "default_moons_noise")]
        noise: f64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    LinearRegression {
        n: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        noise: f64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    QuadraticBowl {
        diag: Vec<f64>,
        init: Vec<f64>,
        #[serde(default = "default_bowl_examples")]
        examples: usize,
        #[serde(default)]
        noise: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
}

/// Materialized data for one run.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Supervised { train: Dataset, test: Dataset },
    Bowl(QuadraticBowl),
}

pub fn make_dataset(spec: &DatasetSpec, seed: u64) -> Result<DataSource> {
    match spec {
        DatasetSpec::Blobs { n, k, dim, separation, sigma, test_fraction } => {
            if *n == 0 || *k < 2 || *dim < 2 || !(*sigma > 0.0) {
                return Err(Error::invalid("blobs: need n > 0, k >= 2, dim >= 2, sigma > 0"));
            }
            let all = blobs(*n, *k, *dim, *separation, *sigma, seed);
            split(all, *test_fraction, seed)
        }
        DatasetSpec::TwoMoons { n, noise, test_fraction } => {
            if *n < 2 || !(*noise >= 0.0) {
                return Err(Error::invalid("two_moons: need n >= 2 and noise >= 0"));
            }
            split(two_moons(*n, *noise, seed), *test_fraction, seed)
        }
        DatasetSpec::LinearRegression { n, dim, noise, test_fraction } => {
            if *n == 0 || *dim == 0 || !(*noise >= 0.0) {
                return Err(Error::invalid("linear_regression: need n > 0, dim > 0, noise >= 0"));
            }
            split(linear_regression(*n, *dim, *noise, seed), *test_fraction, seed)
        }
        DatasetSpec::QuadraticBowl { diag, init, examples, noise } => {
            Ok(DataSource::Bowl(QuadraticBowl::with_noise(diag, init, *examples, *noise, seed)?))
        }
        DatasetSpec::Idx { train_images, train_labels, test_images, test_labels, limit } => {
            let mut train = super::idx::load_idx(train_images, train_labels)?;
            let test = super::idx::load_idx(test_images, test_labels)?;
            if let Some(limit) = limit {
                if *limit == 0 {
                    return Err(Error::invalid("idx: limit must be positive"));
                }
                let rows: Vec<usize> = (0..train.len().min(*limit)).collect();
                train = train.subset(&rows, Split::Train);
            }
            Ok(DataSource::Supervised { train, test: Dataset { split: Split::Test, ..test } })
        }
    }
}

fn split(all: Dataset, test_fraction: f64, seed: u64) -> Result<DataSource> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid(format!("test_fraction must lie in [0, 1), got {test_fraction}")));
    }
    let mut rng = RngStream::new(seed ^ SPLIT_SALT, StreamPurpose::Shuffle);
    let mut rows: Vec<usize> = (0..all.len()).collect();
    rows.shuffle(rng.rng());
    let n_test = (all.len() as f64 * test_fraction).round() as usize;
    let (test_rows, train_rows) = rows.split_at(n_test);
    Ok(DataSource::Supervised {
        train: all.subset(train_rows, Split::Train),
        test: all.subset(test_rows, Split::Test),
    })
}

// Keeps the train/test split independent of the training shuffle stream.
const SPLIT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

fn blobs(n: usize, k: usize, dim: usize, separation: f64, sigma: f64, seed: u64) -> Dataset {
    let mut rng = RngStream::new(seed, StreamPurpose::Noise);
    let radius = separation * sigma / (2.0 * (PI / k as f64).sin());
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        let angle = 2.0 * PI * class as f64 / k as f64;
        for j in 0..dim {
            let center = match j {
                0 => radius * angle.cos(),
                1 => radius * angle.sin(),
                _ => 0.0,
            };
            let z: f64 = rng.rng().sample(StandardNormal);
            features.push(center + sigma * z);
        }
        labels.push(class);
    }
    Dataset { features, n_features: dim, targets: Targets::Classes { labels, num_classes: k }, split: Split::Train }
}

fn two_moons(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = RngStream::new(seed, StreamPurpose::Noise);
    let mut features = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let t: f64 = rng.rng().gen_range(0.0..PI);
        let (x, y) = if class == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
        let zx: f64 = rng.rng().sample(StandardNormal);
        let zy: f64 = rng.rng().sample(StandardNormal);
        features.push(x + noise * zx);
        features.push(y + noise * zy);
        labels.push(class);
    }
    Dataset { features, n_features: 2, targets: Targets::Classes { labels, num_classes: 2 }, split: Split::Train }
}

fn linear_regression(n: usize, dim: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = RngStream::new(seed, StreamPurpose::Noise);
    let weights: Vec<f64> = (0..dim).map(|_| rng.rng().sample(StandardNormal)).collect();
    let bias: f64 = rng.rng().sample(StandardNormal);
    let mut features = Vec::with_capacity(n * dim);
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..dim).map(|_| rng.rng().sample(StandardNormal)).collect();
        let z: f64 = rng.rng().sample(StandardNormal);
        values.push(x.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>() + bias + noise * z);
        features.extend(x);
    }
    Dataset { features, n_features: dim, targets: Targets::Real { values, dim: 1 }, split: Split::Train }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let spec = DatasetSpec::TwoMoons { n: 100, noise: 0.1, test_fraction: 0.2 };
        assert_eq!(make_dataset(&spec, 3).unwrap(), make_dataset(&spec, 3).unwrap());
        assert_ne!(make_dataset(&spec, 3).unwrap(), make_dataset(&spec, 4).unwrap());
    }

    #[test]
    fn default_split_is_80_20() {
        let spec = DatasetSpec::Blobs { n: 100, k: 2, dim: 2, separation: 5.0, sigma: 1.0, test_fraction: 0.2 };
        match make_dataset(&spec, 1).unwrap() {
            DataSource::Supervised { train, test } => {
                assert_eq!(train.len(), 80);
                assert_eq!(test.len(), 20);
                assert_eq!(test.split, Split::Test);
            }
            _ => panic!("expected supervised data"),
        }
    }

    #[test]
    fn nonpositive_sizes_rejected() {
        let spec = DatasetSpec::TwoMoons { n: 0, noise: 0.1, test_fraction: 0.2 };
        assert!(matches!(make_dataset(&spec, 1), Err(Error::InvalidArgument(_))));
        let spec = DatasetSpec::Blobs { n: 0, k: 2, dim: 2, separation: 5.0, sigma: 1.0, test_fraction: 0.2 };
        assert!(make_dataset(&spec, 1).is_err());
    }

    #[test]
    fn bowl_minimum_is_zero_at_origin() {
        let bowl = QuadraticBowl::diagonal(&[1.0, 10.0], &[1.0, 1.0]).unwrap();
        assert_eq!(bowl.objective(&[0.0, 0.0]), 0.0);
        assert_eq!(bowl.objective(&[1.0, 1.0]), 5.5);
        assert_eq!(bowl.gradient(&[1.0, 1.0]), vec![1.0, 10.0]);
    }

    #[test]
    fn dataset_rejects_mismatched_rows() {
        let t = Targets::Classes { labels: vec![0, 1, 1], num_classes: 2 };
        assert!(matches!(Dataset::new(vec![0.0; 4], 2, t, Split::Train), Err(Error::Consistency(_))));
        let t = Targets::Classes { labels: vec![0, 2], num_classes: 2 };
        assert!(Dataset::new(vec![0.0; 4], 2, t, Split::Train).is_err());
    }
}
