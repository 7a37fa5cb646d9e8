//! Forgetting rate, catastrophic forgetting rate, accuracy deltas and
//! aggregation over trials.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{evaluate, ModelSpec, ParamVector};

/// Membership counts over the unlearn set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForgettingCounts {
    /// Members before unlearning.
    pub bt: usize,
    /// Non-members before unlearning.
    pub bf: usize,
    /// Non-members after unlearning.
    pub af: usize,
}

impl ForgettingCounts {
    /// `member` verdicts for the same samples, in the same order.
    pub fn from_verdicts(before: &[bool], after: &[bool]) -> Result<Self> {
        if before.len() != after.len() {
            return Err(Error::DimensionMismatch {
                expected: before.len(),
                got: after.len(),
            });
        }
        let bt = before.iter().filter(|&&m| m).count();
        Ok(ForgettingCounts {
            bt,
            bf: before.len() - bt,
            af: after.iter().filter(|&&m| !m).count(),
        })
    }

    /// `(AF - BF) / BT`.
    pub fn rate(&self) -> Result<f64> {
        if self.bt == 0 {
            return Err(Error::Undefined("forgetting rate with no memorized unlearn samples (BT = 0)"));
        }
        Ok((self.af as f64 - self.bf as f64) / self.bt as f64)
    }
}

pub fn forgetting_rate(verdicts_before: &[bool], verdicts_after: &[bool]) -> Result<f64> {
    ForgettingCounts::from_verdicts(verdicts_before, verdicts_after)?.rate()
}

/// Members among the retained training samples, before and after.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetentionCounts {
    pub bt_train: usize,
    pub at_train: usize,
}

impl RetentionCounts {
    pub fn from_verdicts(before: &[bool], after: &[bool]) -> Result<Self> {
        if before.len() != after.len() {
            return Err(Error::DimensionMismatch {
                expected: before.len(),
                got: after.len(),
            });
        }
        Ok(RetentionCounts {
            bt_train: before.iter().filter(|&&m| m).count(),
            at_train: after.iter().filter(|&&m| m).count(),
        })
    }

    /// `(BT_train - AT_train) / BT_train`, clamped to `[-1, 1]`.
    pub fn rate(&self) -> Result<f64> {
        if self.bt_train == 0 {
            return Err(Error::Undefined("catastrophic forgetting rate with BT_train = 0"));
        }
        let v = (self.bt_train as f64 - self.at_train as f64) / self.bt_train as f64;
        Ok(v.clamp(-1.0, 1.0))
    }
}

pub fn catastrophic_forgetting_rate(member_verdicts_before: &[bool], member_verdicts_after: &[bool]) -> Result<f64> {
    RetentionCounts::from_verdicts(member_verdicts_before, member_verdicts_after)?.rate()
}

/// Fraction of `predicted` equal to `labels`.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: predicted.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `(acc_before, acc_after, acc_before - acc_after)` on one test set.
pub fn accuracy_drop(
    before: &ParamVector,
    after: &ParamVector,
    spec: &ModelSpec,
    x: &Matrix,
    labels: &[usize],
) -> Result<(f64, f64, f64)> {
    let (a, _) = evaluate(before, spec, x, labels)?;
    let (b, _) = evaluate(after, spec, x, labels)?;
    Ok((a, b, a - b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnReport {
    pub method: String,
    pub trial_seed: u64,
    #[serde(rename = "BT")]
    pub bt: usize,
    #[serde(rename = "BF")]
    pub bf: usize,
    #[serde(rename = "AF")]
    pub af: usize,
    /// Absent when BT = 0.
    #[serde(rename = "FR")]
    pub fr: Option<f64>,
    #[serde(rename = "BT_train")]
    pub bt_train: usize,
    #[serde(rename = "AT_train")]
    pub at_train: usize,
    #[serde(rename = "CFR")]
    pub cfr: Option<f64>,
    pub acc_before: f64,
    pub acc_after: f64,
    pub diff_acc: f64,
    pub runtime_seconds: f64,
}

impl UnlearnReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        method: &str,
        trial_seed: u64,
        unlearn_before: &[bool],
        unlearn_after: &[bool],
        retained_before: &[bool],
        retained_after: &[bool],
        acc_before: f64,
        acc_after: f64,
        runtime_seconds: f64,
    ) -> Result<Self> {
        let f = ForgettingCounts::from_verdicts(unlearn_before, unlearn_after)?;
        let r = RetentionCounts::from_verdicts(retained_before, retained_after)?;
        Ok(UnlearnReport {
            method: method.to_string(),
            trial_seed,
            bt: f.bt,
            bf: f.bf,
            af: f.af,
            fr: f.rate().ok(),
            bt_train: r.bt_train,
            at_train: r.at_train,
            cfr: r.rate().ok(),
            acc_before,
            acc_after,
            diff_acc: acc_before - acc_after,
            runtime_seconds,
        })
    }

    /// FR below zero: more unlearn samples look like members than before.
    pub fn reversed(&self) -> bool {
        self.fr.is_some_and(|fr| fr < 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Unbiased (n - 1); zero for a single value.
    pub variance: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let variance = if n < 2 {
            0.0
        } else {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        };
        Some(Stat { mean, variance, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub method: String,
    pub trials: usize,
    pub trial_seeds: Vec<u64>,
    #[serde(rename = "FR")]
    pub fr: Option<Stat>,
    #[serde(rename = "CFR")]
    pub cfr: Option<Stat>,
    pub acc_before: Option<Stat>,
    pub acc_after: Option<Stat>,
    pub diff_acc: Option<Stat>,
    pub runtime_seconds: Option<Stat>,
    /// Trials whose FR was undefined (BT = 0).
    pub undefined_fr: usize,
    pub reversed: usize,
}

/// Per-field mean and variance; trials are processed in seed order.
pub fn aggregate_trials(reports: &[UnlearnReport]) -> Result<TrialSummary> {
    let first = reports.first().ok_or(Error::Empty("trial reports"))?;
    if let Some(other) = reports.iter().find(|r| r.method != first.method) {
        return Err(Error::invalid(format!(
            "cannot aggregate methods `{}` and `{}` together",
            first.method, other.method
        )));
    }
    let mut sorted: Vec<&UnlearnReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.trial_seed);
    let collect = |f: fn(&UnlearnReport) -> Option<f64>| Stat::of(&sorted.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
    Ok(TrialSummary {
        method: first.method.clone(),
        trials: sorted.len(),
        trial_seeds: sorted.iter().map(|r| r.trial_seed).collect(),
        fr: collect(|r| r.fr),
        cfr: collect(|r| r.cfr),
        acc_before: collect(|r| Some(r.acc_before)),
        acc_after: collect(|r| Some(r.acc_after)),
        diff_acc: collect(|r| Some(r.diff_acc)),
        runtime_seconds: collect(|r| Some(r.runtime_seconds)),
        undefined_fr: sorted.iter().filter(|r| r.fr.is_none()).count(),
        reversed: sorted.iter().filter(|r| r.reversed()).count(),
    })
}
