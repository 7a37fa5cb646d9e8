//! Seeded mini-batch training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optim::{optimizer_step, OptimizerKind, OptimizerState};
use super::{cross_entropy_sum, ModelSpec, ParamVector};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Adam,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

/// Training samples: rows of `x` selected by `indices`.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub x: &'a Matrix,
    pub labels: &'a [usize],
    pub indices: &'a [usize],
}

impl<'a> TrainData<'a> {
    pub fn new(x: &'a Matrix, labels: &'a [usize], indices: &'a [usize]) -> Self {
        TrainData { x, labels, indices }
    }

    pub fn batch(&self, batch: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.x.select_rows(batch),
            batch.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Hook invoked before every first-order update.
pub trait BatchObserver {
    /// `batch` holds sorted sample indices, `grad` the mean batch gradient
    /// about to be applied with `state`.
    fn before_update(
        &mut self,
        epoch: usize,
        batch: &[usize],
        params: &ParamVector,
        grad: &[f64],
        state: &OptimizerState,
    ) -> Result<()>;

    fn end_epoch(&mut self, _epoch: usize) {}
}

/// Trains for `config.epochs` epochs of shuffled mini-batches. Batches are
/// sorted by sample index before the gradient is taken, so the result only
/// depends on batch membership.
pub fn train(params: &ParamVector, spec: &ModelSpec, config: &TrainConfig, data: TrainData<'_>) -> Result<ParamVector> {
    train_observed(params, spec, config, data, None)
}

pub fn train_observed(
    params: &ParamVector,
    spec: &ModelSpec,
    config: &TrainConfig,
    data: TrainData<'_>,
    mut observer: Option<&mut dyn BatchObserver>,
) -> Result<ParamVector> {
    config.validate()?;
    if data.indices.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if observer.is_some() && config.optimizer == OptimizerKind::Lbfgs {
        return Err(Error::invalid("batch observers require a first-order optimizer"));
    }
    let mut theta = params.values().to_vec();
    let mut state = OptimizerState::new(config.optimizer, config.learning_rate, theta.len());
    let mut shuffle = rng::seeded(rng::derive_seed(config.shuffle_seed, "shuffle"));
    let mut order = data.indices.to_vec();

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(config.batch_size) {
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let (xb, yb) = data.batch(&batch);
            let n = batch.len() as f64;
            let objective = |t: &[f64]| -> Result<(f64, Vec<f64>)> {
                let p = params.with_values(t.to_vec())?;
                let (loss, mut grad) = cross_entropy_sum(&p, spec, &xb, &yb)?;
                grad.iter_mut().for_each(|g| *g /= n);
                Ok((loss / n, grad))
            };
            match observer.as_deref_mut() {
                Some(obs) => {
                    let (_, grad) = objective(&theta)?;
                    let current = params.with_values(theta.clone())?;
                    obs.before_update(epoch, &batch, &current, &grad, &state)?;
                    state.apply_gradient(&mut theta, &grad)?;
                }
                None => {
                    optimizer_step(&mut state, &mut theta, objective)?;
                }
            }
        }
        if let Some(obs) = observer.as_deref_mut() {
            obs.end_epoch(epoch);
        }
    }
    params.with_values(theta)
}
