use std::time::{Duration, Instant};

use crate::data::ScenarioDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{
    grad_cross_entropy, train, train_observed, BatchObserver, ModelSpec, OptimizerState, ParamVector,
    TrainConfig, TrainData,
};
use crate::rng;

/// Per-epoch sums of the parameter change attributable to the unlearn
/// samples. Training subtracted these; adding them back forgets.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientLedger {
    pub epochs: Vec<Vec<f64>>,
}

impl GradientLedger {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn total(&self, n_params: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_params];
        for e in &self.epochs {
            for (o, v) in out.iter_mut().zip(e) {
                *o += v;
            }
        }
        out
    }
}

/// Records, for every batch, `delta(g_B) - delta(g_B without U)`, where
/// `delta` is the update the optimizer would subtract and the second
/// gradient keeps the batch-size denominator, i.e. drops `U`'s terms.
struct Recorder<'a> {
    spec: &'a ModelSpec,
    x: &'a Matrix,
    labels: &'a [usize],
    in_unlearn: Vec<bool>,
    seen: Vec<bool>,
    current: Vec<f64>,
    ledger: Vec<Vec<f64>>,
    overhead: Duration,
}

impl BatchObserver for Recorder<'_> {
    fn before_update(
        &mut self,
        _epoch: usize,
        batch: &[usize],
        params: &ParamVector,
        grad: &[f64],
        state: &OptimizerState,
    ) -> Result<()> {
        let start = Instant::now();
        let u: Vec<usize> = batch.iter().copied().filter(|&i| self.in_unlearn[i]).collect();
        if !u.is_empty() {
            for &i in &u {
                self.seen[i] = true;
            }
            let labels: Vec<usize> = u.iter().map(|&i| self.labels[i]).collect();
            let (_, g_u) = grad_cross_entropy(params, self.spec, &self.x.select_rows(&u), &labels)?;
            let share = u.len() as f64 / batch.len() as f64;
            let without: Vec<f64> = grad.iter().zip(g_u.values()).map(|(g, gu)| g - share * gu).collect();
            let full = state.peek_delta(grad).ok_or_else(|| Error::invalid("SMU needs a first-order optimizer"))?;
            let rest = state.peek_delta(&without).expect("first-order optimizer");
            for ((c, f), r) in self.current.iter_mut().zip(&full).zip(&rest) {
                *c += f - r;
            }
        }
        self.overhead += start.elapsed();
        Ok(())
    }

    fn end_epoch(&mut self, _epoch: usize) {
        let n = self.current.len();
        self.ledger.push(std::mem::replace(&mut self.current, vec![0.0; n]));
    }
}

/// Result of training with the ledger attached.
#[derive(Clone, Debug)]
pub struct SmuRecord {
    pub params: ParamVector,
    pub ledger: GradientLedger,
    /// Time spent inside the recorder.
    pub record_overhead: Duration,
}

/// Trains from `init` on `data` while recording the ledger of `unlearn`
/// (dataset row indices, all of which must appear in `data.indices`).
pub fn smu_record(
    init: &ParamVector,
    spec: &ModelSpec,
    config: &TrainConfig,
    data: TrainData<'_>,
    unlearn: &[usize],
) -> Result<SmuRecord> {
    let rows = data.x.rows();
    let mut in_unlearn = vec![false; rows];
    for &i in unlearn {
        if i >= rows {
            return Err(Error::invalid(format!("unlearn sample {i} is outside the data")));
        }
        in_unlearn[i] = true;
    }
    let mut recorder = Recorder {
        spec,
        x: data.x,
        labels: data.labels,
        in_unlearn,
        seen: vec![false; rows],
        current: vec![0.0; init.len()],
        ledger: Vec::with_capacity(config.epochs),
        overhead: Duration::ZERO,
    };
    let params = train_observed(init, spec, config, data, Some(&mut recorder))?;
    if config.epochs > 0 {
        if let Some(&missing) = unlearn.iter().find(|&&i| !recorder.seen[i]) {
            return Err(Error::invalid(format!("unlearn sample {missing} never appeared in the training stream")));
        }
    }
    Ok(SmuRecord {
        params,
        ledger: GradientLedger {
            epochs: recorder.ledger,
        },
        record_overhead: recorder.overhead,
    })
}

/// `θ' = θ + Σ_epochs ledger`.
pub fn smu_unlearn(params: &ParamVector, ledger: &GradientLedger) -> Result<ParamVector> {
    if let Some(bad) = ledger.epochs.iter().find(|e| e.len() != params.len()) {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            got: bad.len(),
        });
    }
    let total = ledger.total(params.len());
    params.with_values(params.values().iter().zip(&total).map(|(p, t)| p + t).collect())
}

/// Ledger subtraction followed by `repair_epochs` epochs of ordinary
/// training on the retained samples with a fresh optimizer.
pub fn smu_forget(
    params: &ParamVector,
    ledger: &GradientLedger,
    spec: &ModelSpec,
    config: &TrainConfig,
    dataset: &ScenarioDataset,
    repair_epochs: usize,
) -> Result<ParamVector> {
    let subtracted = smu_unlearn(params, ledger)?;
    if repair_epochs == 0 {
        return Ok(subtracted);
    }
    let retained = dataset.retained_indices();
    let repair = TrainConfig {
        epochs: repair_epochs,
        shuffle_seed: rng::derive_seed(config.shuffle_seed, "smu_repair"),
        ..config.clone()
    };
    train(&subtracted, spec, &repair, TrainData::new(&dataset.x, &dataset.labels, &retained))
}
