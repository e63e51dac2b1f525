//! Small numeric helpers shared by the rest of the crate.
//!
//! Nothing here is general linear algebra: the only solver is the 3x3 normal
//! system behind a quadratic least-squares fit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean and population standard deviation of a set of values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    /// Population standard deviation (divisor `n`).
    pub stddev: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Result<SummaryStats> {
    if values.is_empty() {
        return Err(Error::invalid("summarize: empty input"));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Ok(SummaryStats { mean, stddev: var.sqrt(), n })
}

/// Number of distinct values under exact floating-point equality.
pub(crate) fn distinct_count(xs: &[f64]) -> usize {
    let mut sorted: Vec<f64> = xs.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    sorted.dedup();
    sorted.len()
}

/// Least-squares coefficients `(k0, k1, k2)` of `k0 + k1*x + k2*x^2`.
///
/// The abscissae are centered and scaled to `[-1, 1]` before forming the
/// normal equations, so the 3x3 system stays well conditioned even when the
/// probe offsets are tiny. Coefficients are mapped back to the original `x`.
pub fn least_squares_quadratic(xs: &[f64], ys: &[f64]) -> Result<[f64; 3]> {
    if xs.len() != ys.len() {
        return Err(Error::invalid(format!(
            "least squares: {} abscissae but {} ordinates",
            xs.len(),
            ys.len()
        )));
    }
    let distinct = distinct_count(xs);
    if distinct < 3 {
        return Err(Error::DegenerateDesign { distinct });
    }
    if let Some(bad) = xs.iter().chain(ys).find(|v| !v.is_finite()) {
        return Err(Error::InvalidSample(format!("non-finite value {bad} in fit input")));
    }

    let n = xs.len() as f64;
    let center = xs.iter().sum::<f64>() / n;
    let scale = xs.iter().map(|x| (x - center).abs()).fold(0.0, f64::max);

    // Normal equations in t = (x - center) / scale.
    let mut moments = [0.0f64; 5];
    let mut rhs = [0.0f64; 3];
    for (&x, &y) in xs.iter().zip(ys) {
        let t = (x - center) / scale;
        let mut p = 1.0;
        for m in moments.iter_mut() {
            *m += p;
            p *= t;
        }
        rhs[0] += y;
        rhs[1] += y * t;
        rhs[2] += y * t * t;
    }
    let mut a = [
        [moments[0], moments[1], moments[2]],
        [moments[1], moments[2], moments[3]],
        [moments[2], moments[3], moments[4]],
    ];
    let c = solve3(&mut a, rhs).ok_or(Error::DegenerateDesign { distinct })?;

    // Undo scaling, then centering.
    let c1 = c[1] / scale;
    let c2 = c[2] / (scale * scale);
    let k2 = c2;
    let k1 = c1 - 2.0 * c2 * center;
    let k0 = c[0] - c1 * center + c2 * center * center;
    Ok([k0, k1, k2])
}

/// Gaussian elimination with partial pivoting on a 3x3 system.
fn solve3(a: &mut [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut s = b[row];
        for k in row + 1..3 {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// Test oracle only; it costs two evaluations per coordinate.
pub fn fd_gradient<F>(mut f: F, params: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = params.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let plus = f(&x);
            x[i] = orig - h;
            let minus = f(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Bias-corrected exponential moving average.
#[derive(Debug, Clone)]
pub struct ExpSmoother {
    beta: f64,
    avg: f64,
    count: i32,
}

impl ExpSmoother {
    pub fn new(beta: f64) -> Self {
        Self { beta, avg: 0.0, count: 0 }
    }

    /// Folds in one observation and returns the corrected average.
    pub fn push(&mut self, value: f64) -> f64 {
        self.count += 1;
        self.avg = self.beta * self.avg + (1.0 - self.beta) * value;
        self.value()
    }

    pub fn value(&self) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        self.avg / (1.0 - self.beta.powi(self.count))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn summarize_examples() {
        let s = summarize(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((s.mean, s.stddev, s.n), (1.0, 0.0, 3));
        let s = summarize(&[0.0, 2.0]).unwrap();
        assert_eq!((s.mean, s.stddev, s.n), (1.0, 1.0, 2));
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn fd_gradient_examples() {
        let g = fd_gradient(|x| 0.5 * x[0] * x[0], &[3.0], 1e-6);
        assert!((g[0] - 3.0).abs() < 1e-8);
        let g = fd_gradient(|x| x[0].powi(4), &[1.0], 1e-6);
        assert!((g[0] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_fit_exact() {
        let xs = [-0.1, 0.0, 0.1];
        let ys: Vec<f64> = xs.iter().map(|e| 2.0 - 3.0 * e + 4.0 * e * e).collect();
        let k = least_squares_quadratic(&xs, &ys).unwrap();
        assert!((k[0] - 2.0).abs() < 1e-12);
        assert!((k[1] + 3.0).abs() < 1e-10);
        assert!((k[2] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn quadratic_fit_rejects_degenerate() {
        let err = least_squares_quadratic(&[0.0, 0.0, 1.0], &[1.0, 1.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::DegenerateDesign { distinct: 2 }));
    }

    #[test]
    fn smoother_is_bias_corrected() {
        let mut s = ExpSmoother::new(0.98);
        assert_eq!(s.push(5.0), 5.0);
        assert!((s.push(5.0) - 5.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn summarize_is_permutation_invariant(mut v in prop::collection::vec(-1e3f64..1e3, 1..20), seed in any::<u64>()) {
            let a = summarize(&v).unwrap();
            // deterministic shuffle
            let n = v.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                v.swap(i, (s >> 33) as usize % (i + 1));
            }
            let b = summarize(&v).unwrap();
            prop_assert!((a.mean - b.mean).abs() <= 1e-9 * (1.0 + a.mean.abs()));
            prop_assert!((a.stddev - b.stddev).abs() <= 1e-9 * (1.0 + a.stddev));
        }

        #[test]
        fn residuals_orthogonal_to_design(ys in prop::collection::vec(-10.0f64..10.0, 5), c in -1.0f64..1.0, w in 0.01f64..2.0) {
            let xs: Vec<f64> = (0..5).map(|i| c + w * (i as f64 - 2.0)).collect();
            let k = least_squares_quadratic(&xs, &ys).unwrap();
            let r: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| y - (k[0] + k[1] * x + k[2] * x * x)).collect();
            let scale = ys.iter().map(|y| y.abs()).fold(1.0, f64::max);
            for p in 0..3 {
                let dot: f64 = xs.iter().zip(&r).map(|(x, ri)| x.powi(p) * ri).sum();
                let col_scale = xs.iter().map(|x| x.abs().powi(p)).fold(1.0, f64::max);
                prop_assert!(dot.abs() < 1e-9 * scale * col_scale, "column {} dot {}", p, dot);
            }
        }
    }
}
