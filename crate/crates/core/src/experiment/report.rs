use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExperimentOutcome, TrialFailure, TrialRecord};
use crate::config::{serialize_config, ExperimentConfig};
use crate::error::{Error, Result};
use crate::forsaken::write_trace_csv;
use crate::membership::OracleQuality;
use crate::metrics::{aggregate_trials, Stat, TrialSummary, UnlearnReport};

/// Per-method aggregate as written to `summary.json`. Runtimes are left out
/// so that the file depends on the seed alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub scenario: String,
    pub trials: usize,
    pub trial_seeds: Vec<u64>,
    #[serde(rename = "FR")]
    pub fr: Option<Stat>,
    #[serde(rename = "CFR")]
    pub cfr: Option<Stat>,
    pub acc_before: Option<Stat>,
    pub acc_after: Option<Stat>,
    pub diff_acc: Option<Stat>,
    pub undefined_fr: usize,
    pub reversed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialEntry {
    pub trial: usize,
    pub seed: u64,
    pub oracle: OracleQuality,
    /// Reports without their runtime.
    pub reports: Vec<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub scenario: String,
    pub master_seed: u64,
    pub trials_requested: usize,
    /// Some trials failed; aggregates cover the rest.
    pub partial: bool,
    pub methods: Vec<MethodRow>,
    pub oracle_accuracy: Option<Stat>,
    pub trials: Vec<TrialEntry>,
    pub failures: Vec<TrialFailure>,
}

fn group(reports: &[UnlearnReport]) -> Result<Vec<TrialSummary>> {
    let mut methods: Vec<&str> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    methods
        .iter()
        .map(|m| {
            let of: Vec<UnlearnReport> = reports.iter().filter(|r| r.method == *m).cloned().collect();
            aggregate_trials(&of)
        })
        .collect()
}

fn strip_runtime(r: &UnlearnReport) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(r)?;
    if let Some(map) = v.as_object_mut() {
        map.remove("runtime_seconds");
    }
    Ok(v)
}

pub fn summarize(config: &ExperimentConfig, outcome: &ExperimentOutcome) -> Result<ExperimentSummary> {
    let scenario = config.scenario.kind.name().to_string();
    let methods = group(&outcome.reports())?
        .into_iter()
        .map(|s| MethodRow {
            method: s.method,
            scenario: scenario.clone(),
            trials: s.trials,
            trial_seeds: s.trial_seeds,
            fr: s.fr,
            cfr: s.cfr,
            acc_before: s.acc_before,
            acc_after: s.acc_after,
            diff_acc: s.diff_acc,
            undefined_fr: s.undefined_fr,
            reversed: s.reversed,
        })
        .collect();
    let trials = outcome
        .trials
        .iter()
        .map(|t: &TrialRecord| {
            Ok(TrialEntry {
                trial: t.trial,
                seed: t.seed,
                oracle: t.oracle,
                reports: t.runs.iter().map(|r| strip_runtime(&r.report)).collect::<Result<_>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let oracle: Vec<f64> = outcome.trials.iter().map(|t| t.oracle.accuracy).collect();
    Ok(ExperimentSummary {
        scenario,
        master_seed: config.seed,
        trials_requested: config.trials,
        partial: !outcome.failures.is_empty(),
        methods,
        oracle_accuracy: Stat::of(&oracle),
        trials,
        failures: outcome.failures.clone(),
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// One row per method: FR, CFR, diff_acc and runtime mean and variance.
pub fn write_table(path: &Path, scenario: &str, reports: &[UnlearnReport]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "method",
        "scenario",
        "trials",
        "FR_mean",
        "FR_variance",
        "CFR_mean",
        "CFR_variance",
        "diff_acc_mean",
        "diff_acc_variance",
        "runtime_mean",
        "runtime_variance",
    ])?;
    for s in group(reports)? {
        let mut rec = vec![s.method.clone(), scenario.to_string(), s.trials.to_string()];
        for stat in [s.fr, s.cfr, s.diff_acc, s.runtime_seconds] {
            rec.push(opt(stat.map(|x| x.mean)));
            rec.push(opt(stat.map(|x| x.variance)));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_trials(path: &Path, reports: &[UnlearnReport]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "method",
        "trial_seed",
        "BT",
        "BF",
        "AF",
        "FR",
        "BT_train",
        "AT_train",
        "CFR",
        "acc_before",
        "acc_after",
        "diff_acc",
        "runtime_seconds",
    ])?;
    for r in reports {
        w.write_record([
            r.method.clone(),
            r.trial_seed.to_string(),
            r.bt.to_string(),
            r.bf.to_string(),
            r.af.to_string(),
            opt(r.fr),
            r.bt_train.to_string(),
            r.at_train.to_string(),
            opt(r.cfr),
            r.acc_before.to_string(),
            r.acc_after.to_string(),
            r.diff_acc.to_string(),
            r.runtime_seconds.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `trial,method,sample_index,role,label,p0..` for every dumped row.
pub fn write_posteriors(path: &Path, trials: &[TrialRecord], after: bool) -> Result<()> {
    let mut w = csv_writer(path)?;
    let p = trials
        .iter()
        .flat_map(|t| t.runs.iter())
        .find_map(|r| r.posteriors_before.first().map(|q| q.len()))
        .unwrap_or(0);
    let mut header: Vec<String> = ["trial", "method", "sample_index", "role", "label"].map(String::from).to_vec();
    header.extend((0..p).map(|j| format!("p{j}")));
    w.write_record(&header)?;
    for t in trials {
        for run in &t.runs {
            let posts = if after { &run.posteriors_after } else { &run.posteriors_before };
            for ((i, role, label), post) in t.dump_rows.iter().zip(posts) {
                let mut rec = vec![
                    t.trial.to_string(),
                    run.report.method.clone(),
                    i.to_string(),
                    role.name().to_string(),
                    label.to_string(),
                ];
                rec.extend(post.probs().iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_reports(path: &Path) -> Result<Vec<UnlearnReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes `summary.json`, `table.csv`, `trials.csv`, `reports.json`,
/// `config.txt`, both posterior dumps and one trace per Forsaken run.
pub fn emit_report(config: &ExperimentConfig, outcome: &ExperimentOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    let reports = outcome.reports();
    if reports.is_empty() {
        return Err(Error::Empty("reports: every trial failed"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    let mut summary = serde_json::to_vec_pretty(&summarize(config, outcome)?)?;
    summary.push(b'\n');
    put("summary.json", summary)?;
    put("reports.json", serde_json::to_vec_pretty(&reports)?)?;
    put("config.txt", serialize_config(config).into_bytes())?;

    let table = dir.join("table.csv");
    write_table(&table, config.scenario.kind.name(), &reports)?;
    let trials = dir.join("trials.csv");
    write_trials(&trials, &reports)?;
    let before = dir.join("posteriors_before.csv");
    write_posteriors(&before, &outcome.trials, false)?;
    let after = dir.join("posteriors_after.csv");
    write_posteriors(&after, &outcome.trials, true)?;
    written.extend([table, trials, before, after]);

    let traces = dir.join("traces");
    for t in &outcome.trials {
        for run in &t.runs {
            if let Some(trace) = &run.trace {
                fs::create_dir_all(&traces).map_err(|e| Error::io(&traces, e))?;
                let path = traces.join(format!("{}_trial{}.csv", run.report.method, t.trial));
                write_trace_csv(&path, trace)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
