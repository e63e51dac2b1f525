//! Quadratic model of the loss along the optimizer's step direction.
//!
//! With `d` the step direction and `eta` the current learning rate, the loss
//! after a step of size `eta + eps` is treated as `k0 + k1*eps + k2*eps^2`.
//! The coefficients come from a least-squares fit to a handful of probed
//! losses, and the fitted minimum `-k1 / (2 k2)` is the proposed change to
//! `eta`, limited by a cubic trust bound `|eps|^3 <= r * L`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// One probed point: loss measured after a step of size `eta + epsilon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSample {
    pub epsilon: f64,
    pub loss: f64,
}

impl LossSample {
    pub fn new(epsilon: f64, loss: f64) -> Self {
        Self { epsilon, loss }
    }
}

/// Fitted coefficients of `k0 + k1*eps + k2*eps^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadFit {
    pub k0: f64,
    pub k1: f64,
    pub k2: f64,
    /// Root-mean-square residual over the fitted samples.
    pub residual_rms: f64,
}

impl QuadFit {
    /// Fit without residual information; handy when coefficients are known.
    pub fn from_coefficients(k0: f64, k1: f64, k2: f64) -> Self {
        Self { k0, k1, k2, residual_rms: 0.0 }
    }

    pub fn eval(&self, eps: f64) -> f64 {
        self.k0 + self.k1 * eps + self.k2 * eps * eps
    }

    /// `k2` counts as zero below this magnitude; the vertex would overflow.
    fn curvature_is_degenerate(&self) -> bool {
        self.k2.abs() < 1e-15 * self.k1.abs().max(1.0)
    }
}

/// Outcome of turning a fit into a learning-rate perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EpsilonProposal {
    /// The fitted minimum lies inside the trust bound.
    Accept(f64),
    /// The fit could not produce a usable proposal.
    RejectNoMinimum,
    /// The phase rule forbids the direction of change.
    RejectPhaseFilter,
    /// The proposal was clipped to `+bound` or `-bound`.
    ClampedToBound(f64),
}

impl EpsilonProposal {
    /// The perturbation carried by an `Accept` or `ClampedToBound` proposal.
    pub fn epsilon(&self) -> Option<f64> {
        match *self {
            EpsilonProposal::Accept(e) | EpsilonProposal::ClampedToBound(e) => Some(e),
            _ => None,
        }
    }
}

/// `n` evenly spaced offsets on `[-b, b]` with `b = min(span_fraction * eta, bound)`.
///
/// The grid is exactly symmetric and contains 0 when `n` is odd.
pub fn probe_points(eta: f64, bound: f64, n: usize, span_fraction: f64) -> Result<Vec<f64>> {
    if n < 3 {
        return Err(Error::invalid(format!("probe_points: need n >= 3 to fit a quadratic, got {n}")));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("probe_points: eta must be positive, got {eta}")));
    }
    if !(bound > 0.0 && bound.is_finite()) {
        return Err(Error::invalid(format!("probe_points: bound must be positive, got {bound}")));
    }
    if !(span_fraction > 0.0 && span_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "probe_points: span_fraction must lie in (0, 1], got {span_fraction}"
        )));
    }
    let half_width = (span_fraction * eta).min(bound);
    let denom = (n - 1) as f64;
    Ok((0..n)
        .map(|i| {
            let num = 2.0 * i as f64 - denom;
            if num == 0.0 {
                0.0
            } else {
                half_width * (num / denom)
            }
        })
        .collect())
}

/// Least-squares quadratic through the samples.
pub fn fit_quadratic(samples: &[LossSample]) -> Result<QuadFit> {
    if let Some(bad) = samples.iter().find(|s| !s.loss.is_finite() || !s.epsilon.is_finite()) {
        return Err(Error::InvalidSample(format!(
            "non-finite sample (epsilon {}, loss {})",
            bad.epsilon, bad.loss
        )));
    }
    let xs: Vec<f64> = samples.iter().map(|s| s.epsilon).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.loss).collect();
    let [k0, k1, k2] = stats::least_squares_quadratic(&xs, &ys)?;
    let sq: f64 = samples
        .iter()
        .map(|s| {
            let r = s.loss - (k0 + k1 * s.epsilon + k2 * s.epsilon * s.epsilon);
            r * r
        })
        .sum();
    let residual_rms = (sq / samples.len() as f64).sqrt();
    Ok(QuadFit { k0, k1, k2, residual_rms })
}

/// Largest `|eps|` allowed by `|eps|^3 <= r * current_loss`.
pub fn epsilon_bound(r: f64, current_loss: f64) -> Result<f64> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::invalid(format!("epsilon threshold must be positive, got {r}")));
    }
    if !(current_loss >= 0.0) {
        return Err(Error::invalid(format!("loss must be non-negative, got {current_loss}")));
    }
    if current_loss == 0.0 {
        return Ok(0.0);
    }
    Ok((r * current_loss).cbrt())
}

/// Minimizer of the fitted quadratic, clipped to `[-bound, bound]`.
///
/// Without positive curvature the constrained minimum sits on an endpoint:
/// the one with lower predicted loss wins, ties go to `-bound`.
pub fn propose_epsilon(fit: &QuadFit, bound: f64) -> EpsilonProposal {
    if !(fit.k0.is_finite() && fit.k1.is_finite() && fit.k2.is_finite()) || !(bound >= 0.0) {
        return EpsilonProposal::RejectNoMinimum;
    }
    if bound == 0.0 {
        return EpsilonProposal::ClampedToBound(0.0);
    }
    if fit.k2 > 0.0 && !fit.curvature_is_degenerate() {
        let eps_min = -fit.k1 / (2.0 * fit.k2);
        if eps_min.abs() <= bound {
            return EpsilonProposal::Accept(eps_min);
        }
        return EpsilonProposal::ClampedToBound(bound.copysign(eps_min));
    }
    // Endpoint rule. The losses at +b and -b differ only through k1.
    if fit.eval(bound) < fit.eval(-bound) {
        EpsilonProposal::ClampedToBound(bound)
    } else {
        EpsilonProposal::ClampedToBound(-bound)
    }
}
