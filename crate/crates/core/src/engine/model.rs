//! Dense models with hand-written backpropagation.
//!
//! Parameters live in one flat vector. Each layer stores its weight matrix
//! (`out x in`, row-major) followed by its bias.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::data::{Dataset, Targets};
use super::rng::RngStream;
use crate::error::{Error, Result};

/// Model choice as written in a run config. Input and output widths come
/// from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    LinearRegression,
    LogisticRegression,
    Mlp { hidden: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    LinearRegression,
    LogisticRegression,
    /// Full width list including input and output, ReLU between layers.
    Mlp { layer_sizes: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SoftmaxCrossEntropy,
    HalfSquaredError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    kind: ModelKind,
    sizes: Vec<usize>,
    loss: LossKind,
}

impl Model {
    pub fn new(kind: ModelKind, n_in: usize, n_out: usize) -> Result<Self> {
        let (sizes, loss) = match &kind {
            ModelKind::LinearRegression => (vec![n_in, n_out], LossKind::HalfSquaredError),
            ModelKind::LogisticRegression => (vec![n_in, n_out], LossKind::SoftmaxCrossEntropy),
            ModelKind::Mlp { layer_sizes } => {
                if layer_sizes.len() < 2 {
                    return Err(Error::invalid("mlp needs at least an input and an output width"));
                }
                if layer_sizes[0] != n_in || *layer_sizes.last().unwrap() != n_out {
                    return Err(Error::InvalidInput(format!(
                        "mlp widths {layer_sizes:?} do not match data ({n_in} in, {n_out} out)"
                    )));
                }
                (layer_sizes.clone(), LossKind::SoftmaxCrossEntropy)
            }
        };
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(Self { kind, sizes, loss })
    }

    /// Builds a model that fits `data`; MLPs use softmax output for class
    /// targets and squared error for real targets.
    pub fn for_data(spec: &ModelSpec, data: &Dataset) -> Result<Self> {
        let n_in = data.n_features;
        let n_out = data.targets.output_dim();
        let classes = matches!(data.targets, Targets::Classes { .. });
        let model = match spec {
            ModelSpec::LinearRegression if !classes => Model::new(ModelKind::LinearRegression, n_in, n_out)?,
            ModelSpec::LogisticRegression if classes => Model::new(ModelKind::LogisticRegression, n_in, n_out)?,
            ModelSpec::Mlp { hidden } => {
                let mut layer_sizes = vec![n_in];
                layer_sizes.extend(hidden);
                layer_sizes.push(n_out);
                let mut m = Model::new(ModelKind::Mlp { layer_sizes }, n_in, n_out)?;
                if !classes {
                    m.loss = LossKind::HalfSquaredError;
                }
                m
            }
            _ => {
                return Err(Error::Config(format!("model {spec:?} does not match the dataset's target type")));
            }
        };
        Ok(model)
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// He-normal hidden weights, scaled-normal output weights, zero biases.
    /// Single-layer models start at zero.
    pub fn init_params(&self, rng: &mut RngStream) -> Vec<f64> {
        let mut params = vec![0.0; self.num_params()];
        if self.sizes.len() == 2 {
            return params;
        }
        let n_layers = self.sizes.len() - 1;
        let mut offset = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let gain = if l + 1 < n_layers { 2.0 } else { 1.0 };
            let std = (gain / fan_in as f64).sqrt();
            for p in &mut params[offset..offset + fan_in * fan_out] {
                let z: f64 = rng.rng().sample(StandardNormal);
                *p = std * z;
            }
            offset += fan_in * fan_out + fan_out;
        }
        params
    }

    fn check(&self, params: &[f64], data: &Dataset, rows: &[usize]) -> Result<()> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if params.len() != self.num_params() {
            return Err(Error::InvalidInput(format!(
                "model expects {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        if data.n_features != self.sizes[0] || data.targets.output_dim() != *self.sizes.last().unwrap() {
            return Err(Error::InvalidInput("dataset shape does not match model".into()));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= data.len()) {
            return Err(Error::InvalidInput(format!("row {r} out of range for {} examples", data.len())));
        }
        Ok(())
    }

    /// Forward pass for one example; returns pre-activations per layer.
    fn forward_example(&self, params: &[f64], x: &[f64], pre: &mut Vec<Vec<f64>>, post: &mut Vec<Vec<f64>>) {
        pre.clear();
        post.clear();
        post.push(x.to_vec());
        let n_layers = self.sizes.len() - 1;
        let mut offset = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let weights = &params[offset..offset + n_in * n_out];
            let bias = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let input = &post[l];
            let z: Vec<f64> = (0..n_out)
                .map(|o| bias[o] + weights[o * n_in..(o + 1) * n_in].iter().zip(input).map(|(w, a)| w * a).sum::<f64>())
                .collect();
            let a = if l + 1 < n_layers { z.iter().map(|&v| v.max(0.0)).collect() } else { z.clone() };
            pre.push(z);
            post.push(a);
            offset += n_in * n_out + n_out;
        }
    }

    /// Loss of one example and the derivative with respect to the output.
    fn example_loss(&self, output: &[f64], targets: &Targets, row: usize, want_delta: bool) -> (f64, Vec<f64>) {
        match (self.loss, targets) {
            (LossKind::SoftmaxCrossEntropy, Targets::Classes { labels, .. }) => {
                let label = labels[row];
                let max = output.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = output.iter().map(|&z| (z - max).exp()).sum();
                let log_z = max + sum_exp.ln();
                let loss = log_z - output[label];
                let delta = if want_delta {
                    output
                        .iter()
                        .enumerate()
                        .map(|(k, &z)| (z - log_z).exp() - if k == label { 1.0 } else { 0.0 })
                        .collect()
                } else {
                    Vec::new()
                };
                (loss, delta)
            }
            (LossKind::HalfSquaredError, Targets::Real { values, dim }) => {
                let y = &values[row * dim..(row + 1) * dim];
                let diff: Vec<f64> = output.iter().zip(y).map(|(o, t)| o - t).collect();
                let loss = 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
                (loss, diff)
            }
            _ => unreachable!("loss kind and target type are matched at construction"),
        }
    }

    /// Mean loss over `rows` of `data`.
    pub fn loss(&self, params: &[f64], data: &Dataset, rows: &[usize]) -> Result<f64> {
        self.check(params, data, rows)?;
        let (mut pre, mut post) = (Vec::new(), Vec::new());
        let total: f64 = rows
            .iter()
            .map(|&r| {
                self.forward_example(params, data.row(r), &mut pre, &mut post);
                self.example_loss(post.last().unwrap(), &data.targets, r, false).0
            })
            .sum();
        Ok(total / rows.len() as f64)
    }

    /// Mean loss and its exact gradient.
    pub fn loss_and_grad(&self, params: &[f64], data: &Dataset, rows: &[usize]) -> Result<(f64, Vec<f64>)> {
        self.check(params, data, rows)?;
        let n_layers = self.sizes.len() - 1;
        let offsets: Vec<usize> = self
            .sizes
            .windows(2)
            .scan(0, |acc, w| {
                let start = *acc;
                *acc += w[0] * w[1] + w[1];
                Some(start)
            })
            .collect();
        let mut grad = vec![0.0; params.len()];
        let (mut pre, mut post) = (Vec::new(), Vec::new());
        let mut total = 0.0;
        for &r in rows {
            self.forward_example(params, data.row(r), &mut pre, &mut post);
            let (loss, mut delta) = self.example_loss(post.last().unwrap(), &data.targets, r, true);
            total += loss;
            for l in (0..n_layers).rev() {
                let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
                let off = offsets[l];
                let input = &post[l];
                for o in 0..n_out {
                    let g_row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                    for (g, a) in g_row.iter_mut().zip(input) {
                        *g += delta[o] * a;
                    }
                    grad[off + n_in * n_out + o] += delta[o];
                }
                if l > 0 {
                    let weights = &params[off..off + n_in * n_out];
                    let z_prev = &pre[l - 1];
                    delta = (0..n_in)
                        .map(|i| {
                            if z_prev[i] <= 0.0 {
                                return 0.0;
                            }
                            (0..n_out).map(|o| weights[o * n_in + i] * delta[o]).sum()
                        })
                        .collect();
                }
            }
        }
        let scale = 1.0 / rows.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((total * scale, grad))
    }

    /// Mean loss over the whole dataset and, for classifiers, accuracy.
    pub fn evaluate(&self, params: &[f64], data: &Dataset) -> Result<(f64, Option<f64>)> {
        let rows: Vec<usize> = (0..data.len()).collect();
        self.check(params, data, &rows)?;
        let (mut pre, mut post) = (Vec::new(), Vec::new());
        let mut total = 0.0;
        let mut correct = 0usize;
        for &r in &rows {
            self.forward_example(params, data.row(r), &mut pre, &mut post);
            let out = post.last().unwrap();
            total += self.example_loss(out, &data.targets, r, false).0;
            if let Targets::Classes { labels, .. } = &data.targets {
                let pred = out
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(k, _)| k)
                    .unwrap_or(0);
                if pred == labels[r] {
                    correct += 1;
                }
            }
        }
        let n = rows.len() as f64;
        let acc = matches!(data.targets, Targets::Classes { .. }).then(|| correct as f64 / n);
        Ok((total / n, acc))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::data::Split;
    use crate::engine::rng::StreamPurpose;
    use crate::stats::fd_gradient;

    fn one_example(x: Vec<f64>, y: f64) -> Dataset {
        Dataset::new(x, 1, Targets::Real { values: vec![y], dim: 1 }, Split::Train).unwrap()
    }

    #[test]
    fn linear_regression_zero_loss() {
        let m = Model::new(ModelKind::LinearRegression, 1, 1).unwrap();
        assert_eq!(m.loss(&[0.0, 0.0], &one_example(vec![1.0], 0.0), &[0]).unwrap(), 0.0);
    }

    #[test]
    fn linear_regression_gradient_by_hand() {
        let m = Model::new(ModelKind::LinearRegression, 1, 1).unwrap();
        let (loss, g) = m.loss_and_grad(&[0.0, 0.0], &one_example(vec![1.0], 1.0), &[0]).unwrap();
        assert_eq!(loss, 0.5);
        assert_eq!(g, vec![-1.0, -1.0]);
    }

    #[test]
    fn logistic_uniform_logits() {
        let m = Model::new(ModelKind::LogisticRegression, 2, 2).unwrap();
        let data = Dataset::new(
            vec![0.3, -1.0],
            2,
            Targets::Classes { labels: vec![1], num_classes: 2 },
            Split::Train,
        )
        .unwrap();
        let loss = m.loss(&[0.0; 6], &data, &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn mlp_2_2_2_by_hand() {
        // W1 = [[1, -1], [0.5, 2]], b1 = [0, -1], W2 = [[1, 0], [-1, 1]], b2 = [0.5, 0]
        let m = Model::new(ModelKind::Mlp { layer_sizes: vec![2, 2, 2] }, 2, 2).unwrap();
        let params = [1.0, -1.0, 0.5, 2.0, 0.0, -1.0, 1.0, 0.0, -1.0, 1.0, 0.5, 0.0];
        let data =
            Dataset::new(vec![1.0, 1.0], 2, Targets::Classes { labels: vec![0], num_classes: 2 }, Split::Train)
                .unwrap();
        // z1 = [0, 1.5], h = [0, 1.5], logits = [0.5, 1.5], loss = ln(e^0.5 + e^1.5) - 0.5
        let want = (0.5f64.exp() + 1.5f64.exp()).ln() - 0.5;
        assert!((m.loss(&params, &data, &[0]).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn zero_mlp_output_bias_gradient() {
        let m = Model::new(ModelKind::Mlp { layer_sizes: vec![2, 3, 2] }, 2, 2).unwrap();
        let data = Dataset::new(
            vec![1.0, 0.0, -1.0, 0.0],
            2,
            Targets::Classes { labels: vec![0, 1], num_classes: 2 },
            Split::Train,
        )
        .unwrap();
        let (_, g) = m.loss_and_grad(&vec![0.0; m.num_params()], &data, &[0, 1]).unwrap();
        // mean of softmax(0) - onehot over labels {0, 1} = [0, 0]
        let out_bias = &g[g.len() - 2..];
        assert_eq!(out_bias, &[0.0, 0.0]);
        // one-example batch: softmax(0) - onehot(0) = [-0.5, 0.5]
        let (_, g) = m.loss_and_grad(&vec![0.0; m.num_params()], &data, &[0]).unwrap();
        assert_eq!(&g[g.len() - 2..], &[-0.5, 0.5]);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let m = Model::new(ModelKind::Mlp { layer_sizes: vec![3, 5, 4, 3] }, 3, 3).unwrap();
        let mut rng = RngStream::new(11, StreamPurpose::Init);
        let params = m.init_params(&mut rng);
        let feats: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.6).collect();
        let data =
            Dataset::new(feats, 3, Targets::Classes { labels: vec![0, 2, 1, 2], num_classes: 3 }, Split::Train)
                .unwrap();
        let rows = [0, 1, 2, 3];
        let (_, g) = m.loss_and_grad(&params, &data, &rows).unwrap();
        let fd = fd_gradient(|p| m.loss(p, &data, &rows).unwrap(), &params, 1e-6);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn shape_mismatch_is_invalid_input() {
        let m = Model::new(ModelKind::LinearRegression, 2, 1).unwrap();
        let err = m.loss(&[0.0; 3], &one_example(vec![1.0], 0.0), &[0]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
        let err = m.loss(&[0.0; 2], &one_example(vec![1.0], 0.0), &[]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }
}
