use serde::{Deserialize, Serialize};

use super::{PenaltyWeights, TargetDistribution};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{backprop, ModelSpec, ParamVector, Posterior, PROB_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlDirection {
    /// KL(model ‖ target).
    Forward,
    /// KL(target ‖ model).
    Reverse,
}

impl KlDirection {
    pub fn name(self) -> &'static str {
        match self {
            KlDirection::Forward => "forward",
            KlDirection::Reverse => "reverse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "forward" => Some(KlDirection::Forward),
            "reverse" => Some(KlDirection::Reverse),
            _ => None,
        }
    }
}

/// `KL(p ‖ q)` in nats with both sides clamped to at least 1e-12.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln()))
        .sum()
}

fn divergence(direction: KlDirection, model: &[f64], target: &[f64]) -> f64 {
    match direction {
        KlDirection::Forward => kl_divergence(model, target),
        KlDirection::Reverse => kl_divergence(target, model),
    }
}

/// Value of the forgetting objective for fixed posteriors:
/// mean divergence to the assigned targets plus `λ·Σ w_d·|M_d|`
/// (`w = 1` when `weights` is `None`).
pub fn forgetting_loss(
    posteriors: &[Posterior],
    targets: &TargetDistribution,
    mask: &[f64],
    lambda: f64,
    weights: Option<&PenaltyWeights>,
    direction: KlDirection,
) -> Result<f64> {
    if posteriors.len() != targets.assignment.len() {
        return Err(Error::invalid(format!(
            "{} posteriors for {} assigned unlearn samples",
            posteriors.len(),
            targets.assignment.len()
        )));
    }
    if posteriors.is_empty() {
        return Err(Error::Empty("unlearn posteriors"));
    }
    let kl: f64 = posteriors
        .iter()
        .enumerate()
        .map(|(k, y)| divergence(direction, y.probs(), targets.target_for(k).probs()))
        .sum::<f64>()
        / posteriors.len() as f64;
    let loss = kl + penalty_value(mask, lambda, weights.map(|w| w.values.as_slice()));
    if !loss.is_finite() {
        return Err(Error::NonFinite("forgetting loss"));
    }
    Ok(loss)
}

fn penalty_value(mask: &[f64], lambda: f64, weights: Option<&[f64]>) -> f64 {
    let l1: f64 = match weights {
        Some(w) => mask.iter().zip(w).map(|(m, w)| w * m.abs()).sum(),
        None => mask.iter().map(|m| 1.0 * m.abs()).sum(),
    };
    lambda * l1
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the divergence with respect to the logits, written into
/// `dlogits` (scaled by `scale`); returns the divergence.
fn divergence_head(direction: KlDirection, y: &[f64], q: &[f64], scale: f64, dlogits: &mut [f64]) -> f64 {
    match direction {
        KlDirection::Forward => {
            // d/dy_k of y_k·(ln max(y_k, ε) - ln q̂_k)
            let g: Vec<f64> = y
                .iter()
                .zip(q)
                .map(|(&yk, &qk)| {
                    yk.max(PROB_FLOOR).ln() - qk.max(PROB_FLOOR).ln() + if yk >= PROB_FLOOR { 1.0 } else { 0.0 }
                })
                .collect();
            let mean: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
            for ((d, &yj), &gj) in dlogits.iter_mut().zip(y).zip(&g) {
                *d = scale * yj * (gj - mean);
            }
        }
        KlDirection::Reverse => {
            let total: f64 = q.iter().sum();
            for ((d, &yj), &qj) in dlogits.iter_mut().zip(y).zip(q) {
                *d = scale * (yj * total - qj);
            }
        }
    }
    divergence(direction, y, q)
}

#[derive(Clone, Debug)]
pub struct ObjectiveValue {
    pub loss: f64,
    pub mean_kl: f64,
    /// Gradient with respect to the mask `M`, using `sign(0) = 0`.
    pub grad: Vec<f64>,
    /// Gradient of the divergence term alone.
    pub smooth_grad: Vec<f64>,
}

/// The forgetting objective as a function of the mask, with `θ_0`, the
/// unlearn samples, their targets and the penalty weights fixed.
pub struct ForgettingObjective<'a> {
    theta0: &'a ParamVector,
    spec: &'a ModelSpec,
    x: &'a Matrix,
    targets: Vec<&'a [f64]>,
    xi: f64,
    lambda: f64,
    weights: &'a [f64],
    direction: KlDirection,
}

impl<'a> ForgettingObjective<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        theta0: &'a ParamVector,
        spec: &'a ModelSpec,
        x: &'a Matrix,
        targets: &'a TargetDistribution,
        xi: f64,
        lambda: f64,
        weights: &'a PenaltyWeights,
        direction: KlDirection,
    ) -> Result<Self> {
        theta0.check_against(spec)?;
        if x.rows() == 0 {
            return Err(Error::Empty("unlearn samples"));
        }
        if x.rows() != targets.assignment.len() {
            return Err(Error::invalid("every unlearn sample needs a target assignment"));
        }
        if weights.values.len() != theta0.len() {
            return Err(Error::DimensionMismatch {
                expected: theta0.len(),
                got: weights.values.len(),
            });
        }
        Ok(ForgettingObjective {
            theta0,
            spec,
            x,
            targets: (0..x.rows()).map(|k| targets.target_for(k).probs()).collect(),
            xi,
            lambda,
            weights: &weights.values,
            direction,
        })
    }

    /// Per-coordinate L1 coefficients `λ·w_d`.
    pub fn l1_coefficients(&self) -> Vec<f64> {
        self.weights.iter().map(|w| self.lambda * w).collect()
    }

    pub fn penalty(&self, mask: &[f64]) -> f64 {
        penalty_value(mask, self.lambda, Some(self.weights))
    }

    pub fn evaluate(&self, mask: &[f64]) -> Result<ObjectiveValue> {
        if mask.len() != self.theta0.len() {
            return Err(Error::DimensionMismatch {
                expected: self.theta0.len(),
                got: mask.len(),
            });
        }
        let theta: Vec<f64> = self.theta0.values().iter().zip(mask).map(|(t, m)| t - self.xi * m).collect();
        let theta = self.theta0.with_values(theta)?;
        let n = self.x.rows() as f64;
        let (kl_sum, dtheta) = backprop(&theta, self.spec.activation, self.x, |s, probs, d| {
            divergence_head(self.direction, probs, self.targets[s], 1.0 / n, d)
        });
        let mean_kl = kl_sum / n;
        let penalty = self.penalty(mask);
        let smooth_grad: Vec<f64> = dtheta.iter().map(|g| -self.xi * g).collect();
        let loss = mean_kl + penalty;
        if !loss.is_finite() {
            return Err(Error::NonFinite("forgetting loss"));
        }
        Ok(self.value_from_parts(mask, loss, smooth_grad))
    }

    /// Completes a value from the total loss and the divergence gradient.
    pub fn value_from_parts(&self, mask: &[f64], loss: f64, smooth_grad: Vec<f64>) -> ObjectiveValue {
        let grad = smooth_grad
            .iter()
            .zip(mask)
            .zip(self.weights)
            .map(|((g, m), w)| g + self.lambda * w * sign(*m))
            .collect();
        ObjectiveValue {
            loss,
            mean_kl: loss - self.penalty(mask),
            grad,
            smooth_grad,
        }
    }
}
