//! Neuron masking: unlearning by optimising a parameter-shaped mask.
//!
//! A cumulative mask `M` is optimised with `θ_0` held fixed; the model used
//! at iteration `t` is `θ_t = θ_0 - ξ·M_t` and the mask gradient `μ_t` is
//! the optimizer's step `M_t - M_{t-1}`. The objective drives the unlearn
//! samples' posteriors towards the average posterior of non-member
//! reference samples of the class the target model assigns them, plus a
//! (weighted) L1 penalty on `M`.

mod objective;
mod owlqn;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use objective::{forgetting_loss, kl_divergence, ForgettingObjective, KlDirection, ObjectiveValue};

use crate::data::{sample_reference_set, Role, ScenarioDataset};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::optim::{Adam, Lbfgs};
use crate::nn::{evaluate, forward_batch, grad_cross_entropy, ModelSpec, OptimizerKind, ParamVector, Posterior};
use crate::rng;
use owlqn::OwlQn;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForsakenConfig {
    /// Maximum number of iterations `T`.
    pub iterations: usize,
    /// Forgetting coefficient `ξ`.
    pub xi: f64,
    /// Penalty coefficient `λ`.
    pub lambda: f64,
    /// Weight the L1 penalty by `ω`; plain L1 otherwise.
    pub use_penalty_weight: bool,
    /// Collapse `ω` to its mean over dimensions.
    pub scalar_penalty_weight: bool,
    pub optimizer: OptimizerKind,
    /// L-BFGS initial step or Adam step size; `None` picks 1.0 and 0.01.
    pub learning_rate: Option<f64>,
    pub d0_fraction: f64,
    pub early_stop_kl: f64,
    pub kl_direction: KlDirection,
    /// Record test accuracy in the trace at every iteration.
    pub trace_test_accuracy: bool,
    pub seed: u64,
}

impl Default for ForsakenConfig {
    fn default() -> Self {
        ForsakenConfig {
            iterations: 30,
            xi: 1.0,
            lambda: 10.0,
            use_penalty_weight: true,
            scalar_penalty_weight: false,
            optimizer: OptimizerKind::Lbfgs,
            learning_rate: None,
            d0_fraction: 0.01,
            early_stop_kl: 0.05,
            kl_direction: KlDirection::Forward,
            trace_test_accuracy: true,
            seed: 0,
        }
    }
}

impl ForsakenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.iterations == 0 {
            return bad("forsaken iterations must be at least 1");
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return bad("xi must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if !(self.d0_fraction > 0.0 && self.d0_fraction <= 0.05) {
            return bad("d0_fraction must be in (0, 0.05]");
        }
        if !(self.early_stop_kl >= 0.0 && self.early_stop_kl.is_finite()) {
            return bad("early_stop_kl must be non-negative");
        }
        if self.optimizer == OptimizerKind::Sgd {
            return bad("forsaken optimizer must be lbfgs or adam");
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("forsaken learning_rate must be positive");
            }
        }
        Ok(())
    }

    pub fn effective_learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.optimizer {
            OptimizerKind::Adam => 0.01,
            _ => 1.0,
        })
    }
}

/// Unlearning targets: one average non-member posterior per class and the
/// class each unlearn sample was assigned at iteration 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetDistribution {
    pub per_class: Vec<Posterior>,
    /// Dataset indices of the unlearn samples, ascending.
    pub unlearn_indices: Vec<usize>,
    pub assignment: Vec<usize>,
}

impl TargetDistribution {
    pub fn target_for(&self, k: usize) -> &Posterior {
        &self.per_class[self.assignment[k]]
    }
}

/// Labels every posterior by its argmax and averages per label. Classes
/// without any posterior get the uniform distribution.
pub fn average_by_class(posteriors: &[Posterior], p: usize) -> Vec<Posterior> {
    let mut sums = vec![vec![0.0; p]; p];
    let mut counts = vec![0usize; p];
    for post in posteriors {
        let c = post.argmax();
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(post.probs()) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| {
            if n == 0 {
                Posterior::uniform(p)
            } else {
                let avg: Vec<f64> = s.iter().map(|v| v / n as f64).collect();
                let total: f64 = avg.iter().sum();
                Posterior::new(avg.iter().map(|v| v / total).collect()).expect("average of posteriors")
            }
        })
        .collect()
}

pub fn estimate_target_posteriors(params: &ParamVector, spec: &ModelSpec, dataset: &ScenarioDataset) -> Result<TargetDistribution> {
    let reference = sample_reference_set(dataset)?;
    let unlearn = dataset.indices(Role::Unlearn);
    if unlearn.is_empty() {
        return Err(Error::Empty("unlearn role"));
    }
    let p = spec.output_dim();
    let ref_post = forward_batch(params, spec, &dataset.x.select_rows(&reference))?;
    let per_class = average_by_class(&ref_post, p);
    let assignment = forward_batch(params, spec, &dataset.x.select_rows(&unlearn))?
        .iter()
        .map(Posterior::argmax)
        .collect();
    Ok(TargetDistribution {
        per_class,
        unlearn_indices: unlearn,
        assignment,
    })
}

/// Per-dimension penalty weights `ω`.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyWeights {
    pub values: Vec<f64>,
}

impl PenaltyWeights {
    pub fn ones(n: usize) -> Self {
        PenaltyWeights { values: vec![1.0; n] }
    }

    /// Every entry replaced by the mean over dimensions.
    pub fn scalar_mean(&self) -> Self {
        let mean = self.values.iter().sum::<f64>() / self.values.len().max(1) as f64;
        PenaltyWeights {
            values: vec![mean; self.values.len()],
        }
    }
}

/// `ω_d` = mean over `D_0` of `|∂ CE(x) / ∂θ_d|`.
pub fn penalty_weights(params: &ParamVector, spec: &ModelSpec, x: &Matrix, labels: &[usize]) -> Result<PenaltyWeights> {
    if x.rows() == 0 {
        return Err(Error::Empty("D0"));
    }
    let grads = (0..x.rows())
        .map(|i| {
            let (_, g) = grad_cross_entropy(params, spec, &x.select_rows(&[i]), &labels[i..=i])?;
            Ok(g.into_values())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PenaltyWeights {
        values: mean_abs(&grads),
    })
}

/// Coordinate-wise mean of absolute values.
pub(crate) fn mean_abs(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows.first().map_or(0, Vec::len)];
    for row in rows {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v.abs();
        }
    }
    let n = rows.len().max(1) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Draws `D_0`: `ceil(fraction·|train|)` retained training samples.
pub fn sample_d0(dataset: &ScenarioDataset, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    let pool = dataset.retained_indices();
    if pool.is_empty() {
        return Err(Error::Empty("retained training samples"));
    }
    let k = ((fraction * pool.len() as f64).ceil() as usize).clamp(1, pool.len());
    let mut r = rng::seeded(rng::derive_seed(seed, "d0"));
    Ok(rng::sample_sorted(&pool, k, &mut r))
}

/// Cumulative mask `M` and the last step `μ_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskGradient {
    pub cumulative: Vec<f64>,
    pub last_step: Vec<f64>,
    pub xi: f64,
}

impl MaskGradient {
    /// The change actually subtracted from `θ_0`: `ξ·M`.
    pub fn applied(&self) -> Vec<f64> {
        self.cumulative.iter().map(|m| self.xi * m).collect()
    }

    pub fn l1(&self) -> f64 {
        self.cumulative.iter().map(|m| (self.xi * m).abs()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub loss: f64,
    pub mean_kl: f64,
    pub test_acc: Option<f64>,
    pub mask_l1: f64,
}

#[derive(Clone, Debug)]
pub struct ForsakenOutcome {
    pub params: ParamVector,
    pub mask: MaskGradient,
    pub trace: Vec<TraceRow>,
    pub targets: TargetDistribution,
    /// Iterations performed; 0 on the early-exit path.
    pub iterations: usize,
    /// Objective evaluations, including the initial one.
    pub evaluations: usize,
    pub d0: Vec<usize>,
    /// Time spent measuring test accuracy for the trace.
    pub trace_seconds: f64,
}

fn apply_mask(theta0: &ParamVector, mask: &[f64], xi: f64) -> Result<ParamVector> {
    let values = theta0.values().iter().zip(mask).map(|(t, m)| t - xi * m).collect();
    theta0.with_values(values)
}

/// Runs the unlearning loop on the dataset's `unlearn` role.
pub fn run_forsaken(theta0: &ParamVector, spec: &ModelSpec, dataset: &ScenarioDataset, config: &ForsakenConfig) -> Result<ForsakenOutcome> {
    config.validate()?;
    theta0.check_against(spec)?;
    let targets = estimate_target_posteriors(theta0, spec, dataset)?;
    let d0 = sample_d0(dataset, config.d0_fraction, config.seed)?;
    let weights = if config.use_penalty_weight {
        let (x0, y0) = dataset.select(&d0);
        let w = penalty_weights(theta0, spec, &x0, &y0)?;
        if config.scalar_penalty_weight {
            w.scalar_mean()
        } else {
            w
        }
    } else {
        PenaltyWeights::ones(theta0.len())
    };
    let x_unlearn = dataset.x.select_rows(&targets.unlearn_indices);
    let objective = ForgettingObjective::new(theta0, spec, &x_unlearn, &targets, config.xi, config.lambda, &weights, config.kl_direction)?;
    let test = dataset.indices(Role::Test);
    let (x_test, y_test) = dataset.select(&test);
    let mut trace_seconds = 0.0;
    let mut test_acc = |params: &ParamVector| -> Result<Option<f64>> {
        if config.trace_test_accuracy && !test.is_empty() {
            let start = Instant::now();
            let acc = evaluate(params, spec, &x_test, &y_test)?.0;
            trace_seconds += start.elapsed().as_secs_f64();
            Ok(Some(acc))
        } else {
            Ok(None)
        }
    };

    let n = theta0.len();
    let mut mask = vec![0.0; n];
    let mut current = objective.evaluate(&mask)?;
    let mut trace = vec![TraceRow {
        iter: 0,
        loss: current.loss,
        mean_kl: current.mean_kl,
        test_acc: test_acc(theta0)?,
        mask_l1: 0.0,
    }];
    let mut outcome = ForsakenOutcome {
        params: theta0.clone(),
        mask: MaskGradient {
            cumulative: mask.clone(),
            last_step: vec![0.0; n],
            xi: config.xi,
        },
        trace: Vec::new(),
        targets: targets.clone(),
        iterations: 0,
        evaluations: 1,
        d0,
        trace_seconds: 0.0,
    };
    if current.mean_kl <= config.early_stop_kl {
        outcome.trace = trace;
        outcome.trace_seconds = trace_seconds;
        return Ok(outcome);
    }

    let lr = config.effective_learning_rate();
    let coefficients = objective.l1_coefficients();
    let smooth_only = coefficients.iter().all(|&c| c == 0.0);
    let mut lbfgs = Lbfgs::with_initial_step(lr);
    let mut owl = OwlQn::new(coefficients, lr);
    let mut adam = Adam::new(lr, n);
    let mut last_step = vec![0.0; n];
    let mut iterations = 0;
    let mut evaluations = 1;
    for t in 1..=config.iterations {
        let before = mask.clone();
        let mut stalled = false;
        match config.optimizer {
            OptimizerKind::Lbfgs if smooth_only => {
                let step = lbfgs.step(&mut mask, current.loss, &current.grad, |m| {
                    let v = objective.evaluate(m)?;
                    Ok((v.loss, v.grad))
                })?;
                stalled = step.line_search_failed && mask == before;
                evaluations += step.evaluations;
                current = ObjectiveValue {
                    mean_kl: step.loss,
                    loss: step.loss,
                    smooth_grad: step.grad.clone(),
                    grad: step.grad,
                };
            }
            OptimizerKind::Lbfgs => {
                let step = owl.step(&mut mask, current.loss, &current.smooth_grad, |m| {
                    let v = objective.evaluate(m)?;
                    Ok((v.loss, v.smooth_grad))
                })?;
                stalled = step.stalled;
                evaluations += step.evaluations;
                if !stalled {
                    current = objective.value_from_parts(&mask, step.loss, step.smooth_grad);
                }
            }
            _ => {
                adam.step(&mut mask, &current.grad)?;
                current = objective.evaluate(&mask)?;
                evaluations += 1;
            }
        }
        if stalled {
            // no further decrease is available from this point
            break;
        }
        if !current.loss.is_finite() {
            return Err(Error::NonFinite("forgetting loss"));
        }
        last_step.iter_mut().zip(mask.iter().zip(&before)).for_each(|(s, (m, b))| *s = m - b);
        iterations = t;
        let params = apply_mask(theta0, &mask, config.xi)?;
        trace.push(TraceRow {
            iter: t,
            loss: current.loss,
            mean_kl: current.mean_kl,
            test_acc: test_acc(&params)?,
            mask_l1: mask.iter().map(|m| (config.xi * m).abs()).sum(),
        });
        if current.mean_kl <= config.early_stop_kl {
            break;
        }
    }
    outcome.params = apply_mask(theta0, &mask, config.xi)?;
    outcome.mask = MaskGradient {
        cumulative: mask,
        last_step,
        xi: config.xi,
    };
    outcome.trace = trace;
    outcome.iterations = iterations;
    outcome.evaluations = evaluations;
    outcome.trace_seconds = trace_seconds;
    Ok(outcome)
}

/// Client-side scaling `μ' = (n0/η)·μ`, so that a server applying
/// `θ - η·μ'/n0` subtracts exactly `μ`.
pub fn client_mask_scale(mask: &[f64], eta: f64, n0: usize) -> Result<Vec<f64>> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid("eta must be positive"));
    }
    if n0 == 0 {
        return Err(Error::invalid("n0 must be at least 1"));
    }
    let factor = n0 as f64 / eta;
    Ok(mask.iter().map(|m| factor * m).collect())
}

/// Inverse of [`client_mask_scale`].
pub fn client_mask_unscale(scaled: &[f64], eta: f64, n0: usize) -> Result<Vec<f64>> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid("eta must be positive"));
    }
    if n0 == 0 {
        return Err(Error::invalid("n0 must be at least 1"));
    }
    Ok(scaled.iter().map(|m| eta * m / n0 as f64).collect())
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    w.write_record(["iter", "loss", "mean_kl", "test_acc", "mask_l1"])?;
    for r in trace {
        w.write_record([
            r.iter.to_string(),
            format!("{:?}", r.loss),
            format!("{:?}", r.mean_kl),
            r.test_acc.map(|a| format!("{a:?}")).unwrap_or_default(),
            format!("{:?}", r.mask_l1),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
