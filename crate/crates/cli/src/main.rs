use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use forsaken::config::{parse_config, ExperimentConfig, Method};
use forsaken::data::{dump_roles, Role};
use forsaken::error::Error as LabError;
use forsaken::experiment::{
    emit_report, load_reports, prepare_trial, run_experiment, run_method, trial_dataset, trial_model, write_table,
};
use forsaken::forsaken::write_trace_csv;
use forsaken::membership::OracleQuality;
use forsaken::nn::{build_model, checkpoint, evaluate, train, TrainData};

#[derive(Parser)]
#[command(name = "forsaken", version, about = "Machine unlearning experiments on synthetic data")]
struct Cli {
    /// Experiment config in `section.key = value` form.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; trial i uses seed + i.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Unlearning method, or a comma-separated list for `run`.
    #[arg(long, global = true)]
    method: Option<String>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the first trial's dataset, one CSV per role.
    GenData,
    /// Train the first trial's target model and save a checkpoint.
    Train,
    /// Run one unlearning method on the first trial.
    Unlearn,
    /// Build the membership oracle and audit the target model.
    Audit,
    /// Full pipeline over all trials and methods.
    Run,
    /// Rebuild `table.csv` from an existing `reports.json`.
    Report,
}

/// Bad flags, unreadable config files and the like: exit code 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(message.into()))
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some()
            || matches!(
                e.downcast_ref::<LabError>(),
                Some(LabError::ConfigSyntax { .. } | LabError::ConfigValue { .. })
            )
    })
}

fn parse_methods(list: &str) -> Result<Vec<Method>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| Method::parse(s).ok_or_else(|| usage(format!("unknown method `{s}`"))))
        .collect()
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            parse_config(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    if let Some(trials) = cli.trials {
        config.trials = trials;
    }
    if let Some(list) = &cli.method {
        config.methods = parse_methods(list)?;
        if config.methods.is_empty() {
            return Err(usage("--method names no method"));
        }
    }
    config.validate()?;
    Ok(config)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create_out(config: &ExperimentConfig) -> Result<&Path> {
    fs::create_dir_all(&config.out).with_context(|| format!("creating {}", config.out.display()))?;
    Ok(&config.out)
}

fn gen_data(config: &ExperimentConfig) -> Result<()> {
    let dataset = trial_dataset(config, 0)?;
    let dir = create_out(config)?.join("data");
    for path in dump_roles(&dataset, &dir)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn train_target(config: &ExperimentConfig) -> Result<()> {
    let dataset = trial_dataset(config, 0)?;
    let (spec, training) = trial_model(config, 0);
    let idx = dataset.training_indices();
    let target = train(&build_model(&spec)?, &spec, &training, TrainData::new(&dataset.x, &dataset.labels, &idx))?;
    let path = create_out(config)?.join("target.fskn");
    checkpoint::save(&path, &target, &spec)?;
    let (x, y) = dataset.select(&idx);
    let (train_acc, _) = evaluate(&target, &spec, &x, &y)?;
    let (x, y) = dataset.select(&dataset.indices(Role::Test));
    let (test_acc, _) = evaluate(&target, &spec, &x, &y)?;
    println!("train accuracy {train_acc:.4}, test accuracy {test_acc:.4}");
    println!("{}", path.display());
    Ok(())
}

/// Runs `--method`, or the first configured method when it is absent.
fn unlearn(config: &ExperimentConfig, explicit: bool) -> Result<()> {
    if explicit && config.methods.len() > 1 {
        return Err(usage("unlearn takes a single --method"));
    }
    let method = config.methods[0];
    let ctx = prepare_trial(config, 0)?;
    let run = run_method(&ctx, config, method)?;
    let out = create_out(config)?;
    let path = out.join(format!("unlearn_{}.json", method.name()));
    write_json(&path, &run.report)?;
    if let Some(trace) = &run.trace {
        write_trace_csv(&out.join(format!("trace_{}.csv", method.name())), trace)?;
    }
    let r = &run.report;
    let fr = r.fr.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    let cfr = r.cfr.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    println!(
        "{}: FR {fr}, CFR {cfr}, accuracy {:.4} -> {:.4}, {:.3}s",
        r.method, r.acc_before, r.acc_after, r.runtime_seconds
    );
    println!("{}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct RoleRate {
    role: &'static str,
    samples: usize,
    member_rate: f64,
}

#[derive(Serialize)]
struct Audit {
    seed: u64,
    oracle: OracleQuality,
    target: Vec<RoleRate>,
}

fn audit(config: &ExperimentConfig) -> Result<()> {
    let ctx = prepare_trial(config, 0)?;
    let mut target = Vec::new();
    for role in [Role::Train, Role::Unlearn, Role::Reference, Role::Test] {
        let idx = ctx.dataset.indices(role);
        if idx.is_empty() {
            continue;
        }
        let verdicts = ctx.oracle.verdicts(&ctx.target, &ctx.spec, &ctx.dataset.x.select_rows(&idx))?;
        let members = verdicts.iter().filter(|&&m| m).count();
        target.push(RoleRate {
            role: role.name(),
            samples: idx.len(),
            member_rate: members as f64 / idx.len() as f64,
        });
    }
    let out = create_out(config)?;
    ctx.oracle.save(&out.join("oracle.json"))?;
    let report = Audit {
        seed: ctx.seed,
        oracle: ctx.oracle_quality,
        target,
    };
    let q = &report.oracle;
    println!("oracle accuracy {:.4}, precision {:.4}, recall {:.4}", q.accuracy, q.precision, q.recall);
    for r in &report.target {
        println!("{:>9}: {} samples, {:.3} judged members", r.role, r.samples, r.member_rate);
    }
    write_json(&out.join("audit.json"), &report)
}

fn run(config: &ExperimentConfig) -> Result<()> {
    let outcome = run_experiment(config)?;
    for f in &outcome.failures {
        eprintln!("trial {} (seed {}) failed at {}: {}", f.trial, f.seed, f.stage, f.message);
    }
    let written = emit_report(config, &outcome, &config.out)?;
    println!(
        "{} of {} trials completed, {} files written to {}",
        outcome.trials.len(),
        config.trials,
        written.len(),
        config.out.display()
    );
    print!("{}", fs::read_to_string(config.out.join("table.csv"))?);
    Ok(())
}

fn report(config: &ExperimentConfig) -> Result<()> {
    let source = config.out.join("reports.json");
    if !source.exists() {
        return Err(anyhow!("{} not found; run `forsaken run` first", source.display()));
    }
    let reports = load_reports(&source)?;
    let table = config.out.join("table.csv");
    write_table(&table, config.scenario.kind.name(), &reports)?;
    print!("{}", fs::read_to_string(&table)?);
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    match cli.command {
        Command::GenData => gen_data(&config),
        Command::Train => train_target(&config),
        Command::Unlearn => unlearn(&config, cli.method.is_some()),
        Command::Audit => audit(&config),
        Command::Run => run(&config),
        Command::Report => report(&config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { 1 } else { 2 })
        }
    }
}
