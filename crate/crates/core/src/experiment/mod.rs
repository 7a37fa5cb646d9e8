//! Per-trial pipeline: data, target, oracle, before snapshot, unlearning,
//! after snapshot, report.

mod report;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use report::{emit_report, load_reports, summarize, write_posteriors, write_table, ExperimentSummary, MethodRow};

use crate::baselines::{
    retrain_full, sisa_predict, sisa_train, sisa_unlearn, smu_forget, smu_record, SisaConfig, SisaEnsemble, SmuRecord,
};
use crate::config::{ExperimentConfig, Method};
use crate::data::{build_scenario, Role, ScenarioDataset};
use crate::error::{Error, Result};
use crate::forsaken::{run_forsaken, ForsakenConfig, TraceRow};
use crate::matrix::Matrix;
use crate::membership::{build_oracle, evaluate_oracle, MembershipOracle, OracleQuality};
use crate::metrics::{accuracy, UnlearnReport};
use crate::nn::{build_model, forward_batch, train, ModelSpec, ParamVector, Posterior, TrainConfig, TrainData};
use crate::rng::derive_seed;

/// Something that maps rows to posteriors and labels.
pub enum Predictor<'a> {
    Single(&'a ParamVector, &'a ModelSpec),
    Ensemble(&'a SisaEnsemble),
}

impl Predictor<'_> {
    pub fn posteriors(&self, x: &Matrix) -> Result<Vec<Posterior>> {
        match self {
            Predictor::Single(params, spec) => forward_batch(params, spec, x),
            Predictor::Ensemble(e) => Ok(sisa_predict(e, x)?.into_iter().map(|(p, _)| p).collect()),
        }
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        match self {
            Predictor::Single(params, spec) => Ok(forward_batch(params, spec, x)?.iter().map(Posterior::argmax).collect()),
            Predictor::Ensemble(e) => Ok(sisa_predict(e, x)?.into_iter().map(|(_, l)| l).collect()),
        }
    }
}

/// Everything shared by the methods of one trial.
pub struct TrialContext {
    pub trial: usize,
    pub seed: u64,
    pub dataset: ScenarioDataset,
    pub spec: ModelSpec,
    pub training: TrainConfig,
    pub target: ParamVector,
    /// Present when SMU is among the methods; the target was trained with it.
    pub smu: Option<SmuRecord>,
    pub oracle: MembershipOracle,
    pub oracle_quality: OracleQuality,
}

/// Snapshot of a predictor: verdicts and accuracy.
struct Snapshot {
    unlearn: Vec<bool>,
    retained: Vec<bool>,
    accuracy: f64,
    dump: Vec<Posterior>,
}

/// Rows whose posteriors are dumped: unlearn, reference and test roles.
pub fn dump_rows(dataset: &ScenarioDataset) -> Vec<usize> {
    (0..dataset.len())
        .filter(|&i| matches!(dataset.roles[i], Role::Unlearn | Role::Reference | Role::Test))
        .collect()
}

impl TrialContext {
    fn snapshot(&self, predictor: &Predictor<'_>) -> Result<Snapshot> {
        let verdicts = |role: Role| -> Result<Vec<bool>> {
            let x = self.dataset.x.select_rows(&self.dataset.indices(role));
            Ok(self.oracle.infer_batch(&predictor.posteriors(&x)?)?.iter().map(|m| m.member).collect())
        };
        let (x_test, y_test) = self.dataset.select(&self.dataset.indices(Role::Test));
        Ok(Snapshot {
            unlearn: verdicts(Role::Unlearn)?,
            retained: verdicts(Role::Train)?,
            accuracy: accuracy(&predictor.predict(&x_test)?, &y_test)?,
            dump: predictor.posteriors(&self.dataset.x.select_rows(&dump_rows(&self.dataset)))?,
        })
    }

    fn forsaken_config(&self, base: &ForsakenConfig) -> ForsakenConfig {
        ForsakenConfig {
            seed: derive_seed(self.seed, "forsaken"),
            ..base.clone()
        }
    }
}

/// The trial's dataset, with its scenario seeded from the trial seed.
pub fn trial_dataset(config: &ExperimentConfig, trial: usize) -> Result<ScenarioDataset> {
    let mut scenario = config.scenario.clone();
    scenario.seed = config.trial_seed(trial);
    build_scenario(&scenario)
}

/// Target architecture and training schedule of a trial.
pub fn trial_model(config: &ExperimentConfig, trial: usize) -> (ModelSpec, TrainConfig) {
    let seed = config.trial_seed(trial);
    let training = TrainConfig {
        shuffle_seed: derive_seed(seed, "shuffle"),
        ..config.training.clone()
    };
    (config.model_spec(derive_seed(seed, "model")), training)
}

/// Builds the trial's data, target model and membership oracle.
pub fn prepare_trial(config: &ExperimentConfig, trial: usize) -> Result<TrialContext> {
    let seed = config.trial_seed(trial);
    let dataset = trial_dataset(config, trial)?;
    let (spec, training) = trial_model(config, trial);
    let init = build_model(&spec)?;
    let idx = dataset.training_indices();
    let data = TrainData::new(&dataset.x, &dataset.labels, &idx);
    let (target, smu) = if config.methods.contains(&Method::Smu) {
        let rec = smu_record(&init, &spec, &training, data, &dataset.indices(Role::Unlearn))?;
        (rec.params.clone(), Some(rec))
    } else {
        (train(&init, &spec, &training, data)?, None)
    };
    let shadow_spec = config.model_spec(derive_seed(seed, "shadow"));
    let shadow_training = TrainConfig {
        shuffle_seed: derive_seed(seed, "shadow_shuffle"),
        ..config.training.clone()
    };
    let (oracle, _) = build_oracle(&dataset, &shadow_spec, &shadow_training, derive_seed(seed, "attack"))?;
    let oracle_quality = evaluate_oracle(&oracle, &target, &spec, &dataset, derive_seed(seed, "oracle_quality"))?;
    Ok(TrialContext {
        trial,
        seed,
        dataset,
        spec,
        training,
        target,
        smu,
        oracle,
        oracle_quality,
    })
}

/// Result of one method in one trial.
#[derive(Clone, Debug)]
pub struct MethodRun {
    pub report: UnlearnReport,
    pub posteriors_before: Vec<Posterior>,
    pub posteriors_after: Vec<Posterior>,
    pub trace: Option<Vec<TraceRow>>,
}

pub fn run_method(ctx: &TrialContext, config: &ExperimentConfig, method: Method) -> Result<MethodRun> {
    let single = Predictor::Single(&ctx.target, &ctx.spec);
    let mut trace = None;
    let (before, after, seconds) = match method {
        Method::None => {
            let s = ctx.snapshot(&single)?;
            let a = ctx.snapshot(&single)?;
            (s, a, 0.0)
        }
        Method::Forsaken => {
            let before = ctx.snapshot(&single)?;
            let cfg = ctx.forsaken_config(&config.forsaken);
            let start = Instant::now();
            let out = run_forsaken(&ctx.target, &ctx.spec, &ctx.dataset, &cfg)?;
            let seconds = start.elapsed().as_secs_f64() - out.trace_seconds;
            trace = Some(out.trace);
            (before, ctx.snapshot(&Predictor::Single(&out.params, &ctx.spec))?, seconds)
        }
        Method::Retrain => {
            let before = ctx.snapshot(&single)?;
            let start = Instant::now();
            let params = retrain_full(&ctx.dataset, &ctx.spec, &ctx.training)?;
            let seconds = start.elapsed().as_secs_f64();
            (before, ctx.snapshot(&Predictor::Single(&params, &ctx.spec))?, seconds)
        }
        Method::Smu => {
            let rec = ctx.smu.as_ref().ok_or_else(|| Error::invalid("SMU ledger was not recorded for this trial"))?;
            let before = ctx.snapshot(&single)?;
            let start = Instant::now();
            let params = smu_forget(&rec.params, &rec.ledger, &ctx.spec, &ctx.training, &ctx.dataset, config.smu_repair_epochs)?;
            let seconds = start.elapsed().as_secs_f64() + rec.record_overhead.as_secs_f64();
            (before, ctx.snapshot(&Predictor::Single(&params, &ctx.spec))?, seconds)
        }
        Method::Sisa => {
            let sisa = SisaConfig {
                seed: derive_seed(ctx.seed, "sisa"),
                ..config.sisa.clone()
            };
            let ensemble = sisa_train(&ctx.dataset, &sisa, &ctx.spec, &ctx.training)?;
            let before = ctx.snapshot(&Predictor::Ensemble(&ensemble))?;
            let start = Instant::now();
            let (after, _) = sisa_unlearn(&ensemble, &ctx.dataset, &ctx.dataset.indices(Role::Unlearn))?;
            let seconds = start.elapsed().as_secs_f64();
            (before, ctx.snapshot(&Predictor::Ensemble(&after))?, seconds)
        }
    };
    let report = UnlearnReport::new(
        method.name(),
        ctx.seed,
        &before.unlearn,
        &after.unlearn,
        &before.retained,
        &after.retained,
        before.accuracy,
        after.accuracy,
        seconds,
    )?;
    Ok(MethodRun {
        report,
        posteriors_before: before.dump,
        posteriors_after: after.dump,
        trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub seed: u64,
    pub stage: String,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub oracle: OracleQuality,
    /// Dataset rows behind the posterior dumps.
    pub dump_rows: Vec<(usize, Role, usize)>,
    pub runs: Vec<MethodRun>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub trials: Vec<TrialRecord>,
    pub failures: Vec<TrialFailure>,
}

impl ExperimentOutcome {
    pub fn reports(&self) -> Vec<UnlearnReport> {
        self.trials.iter().flat_map(|t| t.runs.iter().map(|r| r.report.clone())).collect()
    }
}

/// Runs one trial; a failing stage becomes a [`TrialFailure`].
pub fn run_trial(config: &ExperimentConfig, trial: usize) -> std::result::Result<TrialRecord, TrialFailure> {
    let seed = config.trial_seed(trial);
    let fail = |stage: &str, e: Error| TrialFailure {
        trial,
        seed,
        stage: stage.to_string(),
        message: e.to_string(),
    };
    let ctx = prepare_trial(config, trial).map_err(|e| fail("prepare", e))?;
    let runs = config
        .methods
        .iter()
        .map(|&m| run_method(&ctx, config, m).map_err(|e| fail(m.name(), e)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let rows = dump_rows(&ctx.dataset)
        .into_iter()
        .map(|i| (i, ctx.dataset.roles[i], ctx.dataset.labels[i]))
        .collect();
    Ok(TrialRecord {
        trial,
        seed,
        oracle: ctx.oracle_quality,
        dump_rows: rows,
        runs,
    })
}

/// All trials in index order; failed trials are collected, not fatal.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let mut trials = Vec::new();
    let mut failures = Vec::new();
    for t in 0..config.trials {
        match run_trial(config, t) {
            Ok(r) => trials.push(r),
            Err(f) => failures.push(f),
        }
    }
    Ok(ExperimentOutcome { trials, failures })
}
