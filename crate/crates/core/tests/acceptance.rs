//! End-to-end acceptance suite. Runs every criterion in order, prints one
//! PASS/FAIL line each and exits non-zero if any failed.
//!
//! Criteria run sequentially on purpose: several of them compare wall-clock
//! runtimes, which parallel test threads would distort.

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;

use forsaken::baselines::{sisa_train, sisa_unlearn, smu_record, smu_unlearn, SisaConfig};
use forsaken::config::{ExperimentConfig, Method};
use forsaken::data::{Role, ScenarioKind};
use forsaken::experiment::{emit_report, prepare_trial, run_experiment, run_method, ExperimentOutcome};
use forsaken::fedsim::{server_aggregate, RoundMessage};
use forsaken::forsaken::{
    client_mask_scale, penalty_weights, run_forsaken, ForgettingObjective, KlDirection, TargetDistribution,
};
use forsaken::matrix::Matrix;
use forsaken::metrics::{aggregate_trials, forgetting_rate, Stat, UnlearnReport};
use forsaken::nn::{build_model, grad_cross_entropy, Activation, ModelSpec, OptimizerKind, ParamVector, Posterior, TrainConfig, TrainData};
use forsaken::rng::{derive_seed, seeded};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, budget_secs: u64) -> Result<(), String> {
    if elapsed.as_secs_f64() <= budget_secs as f64 {
        Ok(())
    } else {
        Err(format!("took {:.1}s, budget {budget_secs}s", elapsed.as_secs_f64()))
    }
}

fn mean_of(reports: &[UnlearnReport], method: &str, pick: impl Fn(&forsaken::metrics::TrialSummary) -> Option<Stat>) -> Result<f64, String> {
    let of: Vec<UnlearnReport> = reports.iter().filter(|r| r.method == method).cloned().collect();
    let summary = aggregate_trials(&of).map_err(|e| format!("{method}: {e}"))?;
    pick(&summary).map(|s| s.mean).ok_or_else(|| format!("{method}: statistic undefined"))
}

/// One full `run`: all methods, default scenario, outputs written to `dir`.
struct FullRun {
    outcome: ExperimentOutcome,
    summary: Vec<u8>,
    elapsed: Duration,
}

fn full_run(dir: &std::path::Path) -> Result<FullRun, String> {
    let config = ExperimentConfig::default();
    let start = Instant::now();
    let outcome = run_experiment(&config).map_err(|e| e.to_string())?;
    if !outcome.failures.is_empty() {
        return Err(format!("trial failures: {:?}", outcome.failures));
    }
    emit_report(&config, &outcome, dir).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let summary = fs::read(dir.join("summary.json")).map_err(|e| e.to_string())?;
    Ok(FullRun { outcome, summary, elapsed })
}

fn forgetting_rate_example() -> Check {
    // 100 samples: 90 judged members before, 10 of them non-members; after,
    // 90 non-members in total
    let before: Vec<bool> = (0..100).map(|i| i < 90).collect();
    let after: Vec<bool> = (0..100).map(|i| i >= 90).collect();
    let fr = forgetting_rate(&before, &after).map_err(|e| e.to_string())?;
    let expected = (90.0 - 10.0) / 90.0;
    ensure((fr - expected).abs() <= 1e-12 && (fr - 0.8889).abs() < 1e-4, format!("FR = {fr:.6}"))
}

fn mask_scaling_identity() -> Check {
    let mut rng = seeded(2024);
    let mut worst = 0.0f64;
    for case in 0..1000u32 {
        let eta = 10f64.powf(rng.random_range(-3.0..0.0));
        let n0: u32 = rng.random_range(1..=5000);
        let dim = rng.random_range(1..=32);
        let theta: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mu: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let payload = client_mask_scale(&mu, eta, n0 as usize).map_err(|e| e.to_string())?;
        let spec = ModelSpec::new(vec![dim, 2], 0);
        let params = ParamVector::from_values(&spec, pad(&theta, spec.param_count())).map_err(|e| e.to_string())?;
        let message = RoundMessage {
            client_id: case,
            n0,
            payload: pad(&payload, spec.param_count()),
        };
        let out = server_aggregate(&params, &[message], eta).map_err(|e| e.to_string())?;
        for ((o, t), m) in out.values().iter().zip(&theta).zip(&mu) {
            worst = worst.max((o - (t - m)).abs());
        }
    }
    ensure(worst <= 1e-12, format!("max |error| {worst:.2e} over 1000 cases"))
}

fn pad(v: &[f64], len: usize) -> Vec<f64> {
    let mut out = v.to_vec();
    out.resize(len, 0.0);
    out
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn gradient_checks() -> Check {
    let h = 1e-5;
    let mut worst_ce = 0.0f64;
    let mut worst_kl = 0.0f64;
    let mut rng = seeded(7);
    for case in 0..8u64 {
        let dims = vec![rng.random_range(2..=6), rng.random_range(2..=8), rng.random_range(2..=5), rng.random_range(2..=4)];
        let activation = if case % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let spec = ModelSpec::new(dims.clone(), case).with_activation(activation);
        if spec.param_count() > 200 {
            continue;
        }
        let theta = build_model(&spec).map_err(|e| e.to_string())?;
        let p = *dims.last().unwrap_or(&2);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..dims[0]).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
        let x = Matrix::from_rows(&rows).map_err(|e| e.to_string())?;
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..p)).collect();

        let (_, g) = grad_cross_entropy(&theta, &spec, &x, &labels).map_err(|e| e.to_string())?;
        let loss_at = |values: Vec<f64>| -> Result<f64, String> {
            let params = theta.with_values(values).map_err(|e| e.to_string())?;
            Ok(grad_cross_entropy(&params, &spec, &x, &labels).map_err(|e| e.to_string())?.0)
        };
        for d in 0..theta.len() {
            let mut plus = theta.values().to_vec();
            let mut minus = plus.clone();
            plus[d] += h;
            minus[d] -= h;
            let fd = (loss_at(plus)? - loss_at(minus)?) / (2.0 * h);
            worst_ce = worst_ce.max(relative_error(fd, g.values()[d]));
        }

        let targets = TargetDistribution {
            per_class: (0..p)
                .map(|c| {
                    let mut probs = vec![0.4 / (p - 1) as f64; p];
                    probs[c] = 0.6;
                    Posterior::new(probs)
                })
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?,
            unlearn_indices: (0..4).collect(),
            assignment: labels.clone(),
        };
        let weights = penalty_weights(&theta, &spec, &x, &labels).map_err(|e| e.to_string())?;
        let objective = ForgettingObjective::new(&theta, &spec, &x, &targets, 1.0, 0.5, &weights, KlDirection::Forward)
            .map_err(|e| e.to_string())?;
        // keep every coordinate away from the kink of |M| at zero
        let mask: Vec<f64> = (0..theta.len())
            .map(|_| {
                let m = rng.random_range(0.01..0.1);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let v = objective.evaluate(&mask).map_err(|e| e.to_string())?;
        for d in 0..mask.len() {
            let mut plus = mask.clone();
            let mut minus = mask.clone();
            plus[d] += h;
            minus[d] -= h;
            let fp = objective.evaluate(&plus).map_err(|e| e.to_string())?.loss;
            let fm = objective.evaluate(&minus).map_err(|e| e.to_string())?.loss;
            worst_kl = worst_kl.max(relative_error((fp - fm) / (2.0 * h), v.grad[d]));
        }
    }
    ensure(
        worst_ce <= 1e-4 && worst_kl <= 1e-4,
        format!("max rel err cross-entropy {worst_ce:.2e}, forgetting loss {worst_kl:.2e}"),
    )
}

fn smu_single_step() -> Check {
    let spec = ModelSpec::new(vec![3, 4, 2], 5);
    let theta0 = build_model(&spec).map_err(|e| e.to_string())?;
    let x = Matrix::from_rows(&[vec![0.2, -0.4, 1.0], vec![-1.3, 0.5, 0.7]]).map_err(|e| e.to_string())?;
    let labels = [1, 0];
    let config = TrainConfig {
        epochs: 1,
        batch_size: 2,
        learning_rate: 0.3,
        optimizer: OptimizerKind::Sgd,
        shuffle_seed: 1,
    };
    let rec = smu_record(&theta0, &spec, &config, TrainData::new(&x, &labels, &[0, 1]), &[1]).map_err(|e| e.to_string())?;
    let forgot = smu_unlearn(&rec.params, &rec.ledger).map_err(|e| e.to_string())?;
    let (_, g_a) = grad_cross_entropy(&theta0, &spec, &x.select_rows(&[0]), &[1]).map_err(|e| e.to_string())?;
    let eta = config.learning_rate;
    let worst = forgot
        .values()
        .iter()
        .zip(theta0.values())
        .zip(g_a.values())
        .map(|((f, t), g)| (f - (t - eta / 2.0 * g)).abs())
        .fold(0.0, f64::max);
    ensure(worst <= 1e-9, format!("max |error| {worst:.2e}"))
}

fn headline(run: &FullRun) -> Check {
    within(run.elapsed, 300)?;
    let reports = run.outcome.reports();
    let fr = mean_of(&reports, "forsaken", |s| s.fr)?;
    let diff = mean_of(&reports, "forsaken", |s| s.diff_acc)?;
    ensure(fr >= 0.80 && diff <= 0.05, format!("FR {fr:.4} (>= 0.80), diff_acc {diff:.4} (<= 0.05) over 10 trials"))
}

fn identity_method() -> Check {
    let start = Instant::now();
    let mut details = Vec::new();
    for kind in ScenarioKind::ALL {
        let mut config = ExperimentConfig::default();
        config.methods = vec![Method::None];
        config.trials = 1;
        config.scenario.kind = kind;
        let outcome = run_experiment(&config).map_err(|e| format!("{kind}: {e}"))?;
        if !outcome.failures.is_empty() {
            return Err(format!("{kind}: {:?}", outcome.failures));
        }
        for r in outcome.reports() {
            if r.fr != Some(0.0) || r.cfr != Some(0.0) {
                return Err(format!("{kind}: FR {:?} CFR {:?}", r.fr, r.cfr));
            }
        }
        details.push(kind.name());
    }
    within(start.elapsed(), 60)?;
    Ok(format!("FR = CFR = 0 on {}", details.join(", ")))
}

fn orderings(run: &FullRun) -> Check {
    within(run.elapsed, 600)?;
    let reports = run.outcome.reports();
    let fr_f = mean_of(&reports, "forsaken", |s| s.fr)?;
    let fr_s = mean_of(&reports, "smu", |s| s.fr)?;
    let cfr_f = mean_of(&reports, "forsaken", |s| s.cfr)?;
    let cfr_s = mean_of(&reports, "smu", |s| s.cfr)?;
    let t_f = mean_of(&reports, "forsaken", |s| s.runtime_seconds)?;
    let t_s = mean_of(&reports, "smu", |s| s.runtime_seconds)?;
    let t_r = mean_of(&reports, "retrain", |s| s.runtime_seconds)?;
    let t_sisa = mean_of(&reports, "sisa", |s| s.runtime_seconds)?;

    // the default unlearn set must touch every shard for the SISA comparison
    let config = ExperimentConfig::default();
    let ctx = prepare_trial(&config, 0).map_err(|e| e.to_string())?;
    let sisa = SisaConfig {
        seed: derive_seed(ctx.seed, "sisa"),
        ..config.sisa.clone()
    };
    let ensemble = sisa_train(&ctx.dataset, &sisa, &ctx.spec, &ctx.training).map_err(|e| e.to_string())?;
    let (_, stats) = sisa_unlearn(&ensemble, &ctx.dataset, &ctx.dataset.indices(Role::Unlearn)).map_err(|e| e.to_string())?;
    let all_shards = stats.affected_shards.len() == sisa.shards;

    let ratio = t_sisa / t_r;
    let detail = format!(
        "FR {fr_f:.3} > {fr_s:.3}; CFR {cfr_f:.3} <= {cfr_s:.3}; runtime {t_f:.3}s < {t_s:.3}s < {t_r:.3}s; \
         sisa/retrain {ratio:.2} with {}/{} shards hit",
        stats.affected_shards.len(),
        sisa.shards
    );
    ensure(
        fr_f > fr_s && cfr_f <= cfr_s && t_f < t_s && t_s < t_r && all_shards && (0.5..=2.0).contains(&ratio),
        detail,
    )
}

fn penalty_ablation() -> Check {
    let start = Instant::now();
    let lambdas = [0.0, 10.0, 100.0];
    let mut config = ExperimentConfig::default();
    config.methods = vec![Method::Forsaken];
    let mut reports: Vec<Vec<UnlearnReport>> = vec![Vec::new(); lambdas.len()];
    for trial in 0..config.trials {
        let ctx = prepare_trial(&config, trial).map_err(|e| e.to_string())?;
        for (k, &lambda) in lambdas.iter().enumerate() {
            let mut c = config.clone();
            c.forsaken.lambda = lambda;
            reports[k].push(run_method(&ctx, &c, Method::Forsaken).map_err(|e| e.to_string())?.report);
        }
    }
    let mut diff = Vec::new();
    let mut fr = Vec::new();
    for r in &reports {
        diff.push(mean_of(r, "forsaken", |s| s.diff_acc)?);
        fr.push(mean_of(r, "forsaken", |s| s.fr)?);
    }
    within(start.elapsed(), 300)?;
    ensure(
        diff[0] >= diff[1] && diff[1] >= diff[2] && fr[2] <= fr[1],
        format!(
            "diff_acc {:.4} / {:.4} / {:.4}, FR {:.3} / {:.3} / {:.3} at lambda 0 / 10 / 100",
            diff[0], diff[1], diff[2], fr[0], fr[1], fr[2]
        ),
    )
}

fn oracle_floor() -> Check {
    let start = Instant::now();
    let ctx = prepare_trial(&ExperimentConfig::default(), 0).map_err(|e| e.to_string())?;
    within(start.elapsed(), 60)?;
    let q = ctx.oracle_quality;
    ensure(
        q.accuracy >= 0.65,
        format!("accuracy {:.3}, precision {:.3}, recall {:.3}", q.accuracy, q.precision, q.recall),
    )
}

fn determinism(a: &FullRun, b: &FullRun) -> Check {
    within(a.elapsed + b.elapsed, 600)?;
    ensure(a.summary == b.summary, format!("summary.json {} bytes, identical: {}", a.summary.len(), a.summary == b.summary))
}

fn size_linearity() -> Check {
    let start = Instant::now();
    let sizes = [50usize, 100, 200];
    let mut times = Vec::new();
    for &n in &sizes {
        let mut config = ExperimentConfig::default();
        config.methods = vec![Method::Forsaken];
        config.scenario.n_unlearn = n;
        let ctx = prepare_trial(&config, 0).map_err(|e| e.to_string())?;
        let cfg = forsaken::forsaken::ForsakenConfig {
            seed: derive_seed(ctx.seed, "forsaken"),
            ..config.forsaken.clone()
        };
        let mut runs = Vec::new();
        for _ in 0..5 {
            let t = Instant::now();
            let out = run_forsaken(&ctx.target, &ctx.spec, &ctx.dataset, &cfg).map_err(|e| e.to_string())?;
            runs.push(t.elapsed().as_secs_f64() - out.trace_seconds);
        }
        runs.sort_by(f64::total_cmp);
        times.push(runs[runs.len() / 2]);
    }
    within(start.elapsed(), 300)?;
    let xs: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let r2 = r_squared(&xs, &times);
    ensure(
        r2 >= 0.9,
        format!("median runtimes {:.3}s / {:.3}s / {:.3}s, R^2 {r2:.4}", times[0], times[1], times[2]),
    )
}

/// Coefficient of determination of the least-squares line through the points.
fn r_squared(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, result: Check| {
        match &result {
            Ok(detail) => println!("criterion {id:>2} {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} {name}: FAIL ({detail})");
            }
        }
    };
    report(1, "forgetting-rate worked example", forgetting_rate_example());
    report(2, "client mask scaling identity", mask_scaling_identity());
    report(3, "gradient checks", gradient_checks());
    report(4, "SMU single-step oracle", smu_single_step());

    let dirs = (tempfile::tempdir(), tempfile::tempdir());
    let runs = match dirs {
        (Ok(a), Ok(b)) => full_run(a.path()).and_then(|ra| full_run(b.path()).map(|rb| (ra, rb))),
        _ => Err("cannot create temporary directories".to_string()),
    };
    match &runs {
        Ok((a, _)) => report(5, "headline forgetting at desk scale", headline(a)),
        Err(e) => report(5, "headline forgetting at desk scale", Err(e.clone())),
    }
    report(6, "identity method", identity_method());
    match &runs {
        Ok((a, _)) => report(7, "method orderings", orderings(a)),
        Err(e) => report(7, "method orderings", Err(e.clone())),
    }
    report(8, "penalty ablation", penalty_ablation());
    report(9, "membership oracle floor", oracle_floor());
    match &runs {
        Ok((a, b)) => report(10, "determinism", determinism(a, b)),
        Err(e) => report(10, "determinism", Err(e.clone())),
    }
    report(11, "unlearning-size linearity", size_linearity());

    if failed == 0 {
        println!("all 11 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
