use super::*;
use crate::data::{build_scenario, ScenarioKind, ScenarioSpec};
use crate::nn::{build_model, train, TrainConfig, TrainData};
use proptest::prelude::*;

fn post(v: &[f64]) -> Posterior {
    Posterior::new(v.to_vec()).unwrap()
}

#[test]
fn class_average_hand_example() {
    let avg = average_by_class(&[post(&[0.6, 0.4]), post(&[0.8, 0.2])], 2);
    assert!((avg[0].probs()[0] - 0.7).abs() < 1e-15);
    assert!((avg[0].probs()[1] - 0.3).abs() < 1e-15);
    assert_eq!(avg[1], Posterior::uniform(2));
}

#[test]
fn class_average_fixed_point() {
    let q = post(&[0.2, 0.5, 0.3]);
    let avg = average_by_class(&[q.clone(), q.clone(), q.clone()], 3);
    for (a, b) in avg[1].probs().iter().zip(q.probs()) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(avg[0], Posterior::uniform(3));
}

#[test]
fn mean_abs_hand_example() {
    assert_eq!(mean_abs(&[vec![1.0, -1.0], vec![3.0, 1.0]]), vec![2.0, 1.0]);
}

#[test]
fn single_sample_weights_are_abs_gradient() {
    let spec = ModelSpec::new(vec![3, 4, 2], 5);
    let theta = build_model(&spec).unwrap();
    let x = Matrix::from_rows(&[vec![0.3, -1.0, 2.0]]).unwrap();
    let w = penalty_weights(&theta, &spec, &x, &[1]).unwrap();
    let (_, g) = grad_cross_entropy(&theta, &spec, &x, &[1]).unwrap();
    let expected: Vec<f64> = g.values().iter().map(|v| v.abs()).collect();
    assert_eq!(w.values, expected);
}

#[test]
fn saturated_model_has_zero_weights() {
    let spec = ModelSpec::new(vec![2, 2], 0);
    let mut values = vec![0.0; spec.param_count()];
    values[4] = 1000.0;
    let theta = ParamVector::from_values(&spec, values).unwrap();
    let x = Matrix::from_rows(&[vec![0.5, 0.5], vec![-1.0, 2.0]]).unwrap();
    let w = penalty_weights(&theta, &spec, &x, &[0, 0]).unwrap();
    assert!(w.values.iter().all(|&v| v == 0.0));
    assert!(penalty_weights(&theta, &spec, &Matrix::zeros(0, 2), &[]).is_err());
}

#[test]
fn kl_reference_value() {
    let oracle = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    assert!((kl_divergence(&[0.5, 0.5], &[0.25, 0.75]) - oracle).abs() < 1e-15);
    assert!((oracle - 0.1438).abs() < 1e-4);
}

fn targets_for(posteriors: &[Posterior]) -> TargetDistribution {
    let p = posteriors[0].len();
    let mut per_class = vec![Posterior::uniform(p); p];
    let mut assignment = Vec::new();
    for (k, y) in posteriors.iter().enumerate() {
        per_class[k % p] = y.clone();
        assignment.push(k % p);
    }
    TargetDistribution {
        per_class,
        unlearn_indices: (0..posteriors.len()).collect(),
        assignment,
    }
}

#[test]
fn loss_zero_at_targets() {
    let ys = vec![post(&[0.2, 0.8]), post(&[0.9, 0.1])];
    let t = targets_for(&ys);
    let loss = forgetting_loss(&ys, &t, &[0.0; 4], 10.0, None, KlDirection::Forward).unwrap();
    assert_eq!(loss, 0.0);
}

#[test]
fn ones_weights_match_plain_l1_and_zero_lambda_is_bare_kl() {
    let ys = vec![post(&[0.5, 0.5])];
    let mut t = targets_for(&ys);
    t.per_class[0] = post(&[0.25, 0.75]);
    let mask = [0.3, -0.2, 0.0, 1.5];
    let plain = forgetting_loss(&ys, &t, &mask, 10.0, None, KlDirection::Forward).unwrap();
    let ones = PenaltyWeights::ones(4);
    let weighted = forgetting_loss(&ys, &t, &mask, 10.0, Some(&ones), KlDirection::Forward).unwrap();
    assert_eq!(plain.to_bits(), weighted.to_bits());
    let bare = forgetting_loss(&ys, &t, &mask, 0.0, Some(&ones), KlDirection::Forward).unwrap();
    assert_eq!(bare, kl_divergence(&[0.5, 0.5], &[0.25, 0.75]));
    let missing = TargetDistribution {
        assignment: vec![],
        ..t
    };
    assert!(forgetting_loss(&ys, &missing, &mask, 0.0, None, KlDirection::Forward).is_err());
}

struct Fixture {
    spec: ModelSpec,
    theta: ParamVector,
    x: Matrix,
    targets: TargetDistribution,
    weights: PenaltyWeights,
}

fn fixture(seed: u64) -> Fixture {
    let spec = ModelSpec::new(vec![3, 5, 4], seed).with_activation(crate::nn::Activation::Tanh);
    let theta = build_model(&spec).unwrap();
    let x = Matrix::from_rows(&[vec![0.5, -1.0, 0.2], vec![1.5, 0.3, -0.7], vec![-0.4, 0.9, 1.1]]).unwrap();
    let targets = TargetDistribution {
        per_class: vec![
            post(&[0.4, 0.3, 0.2, 0.1]),
            post(&[0.25, 0.25, 0.25, 0.25]),
            post(&[0.1, 0.1, 0.1, 0.7]),
            post(&[0.3, 0.3, 0.2, 0.2]),
        ],
        unlearn_indices: vec![0, 1, 2],
        assignment: vec![0, 2, 3],
    };
    let weights = PenaltyWeights {
        values: (0..theta.len()).map(|i| 0.1 + (i % 7) as f64 * 0.05).collect(),
    };
    Fixture {
        spec,
        theta,
        x,
        targets,
        weights,
    }
}

fn check_fd(direction: KlDirection, mask: &[f64], seed: u64) -> std::result::Result<(), TestCaseError> {
    let f = fixture(seed);
    let obj = ForgettingObjective::new(&f.theta, &f.spec, &f.x, &f.targets, 0.7, 0.3, &f.weights, direction).unwrap();
    let v = obj.evaluate(mask).unwrap();
    let h = 1e-5;
    for d in 0..mask.len() {
        let mut plus = mask.to_vec();
        let mut minus = mask.to_vec();
        plus[d] += h;
        minus[d] -= h;
        let fd = (obj.evaluate(&plus).unwrap().loss - obj.evaluate(&minus).unwrap().loss) / (2.0 * h);
        let err = (fd - v.grad[d]).abs() / fd.abs().max(v.grad[d].abs()).max(1e-6);
        prop_assert!(err <= 1e-4, "dim {d}: fd {fd} analytic {}", v.grad[d]);
    }
    Ok(())
}

fn mask_strategy() -> impl Strategy<Value = Vec<f64>> {
    // 3*5+5 + 5*4+4 = 44 parameters, each away from the kink at 0
    prop::collection::vec((0.01f64..0.2, any::<bool>()), 44).prop_map(|v| v.into_iter().map(|(m, neg)| if neg { -m } else { m }).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn forward_gradient_matches_finite_differences(mask in mask_strategy(), seed in 0u64..100) {
        check_fd(KlDirection::Forward, &mask, seed)?;
    }

    #[test]
    fn reverse_gradient_matches_finite_differences(mask in mask_strategy(), seed in 0u64..100) {
        check_fd(KlDirection::Reverse, &mask, seed)?;
    }
}

#[test]
fn objective_agrees_with_forgetting_loss() {
    let f = fixture(1);
    let obj = ForgettingObjective::new(&f.theta, &f.spec, &f.x, &f.targets, 1.0, 0.5, &f.weights, KlDirection::Forward).unwrap();
    let mask: Vec<f64> = (0..f.theta.len()).map(|i| (i as f64 * 0.37).sin() * 0.1).collect();
    let v = obj.evaluate(&mask).unwrap();
    let theta = apply_mask(&f.theta, &mask, 1.0).unwrap();
    let ys = forward_batch(&theta, &f.spec, &f.x).unwrap();
    let direct = forgetting_loss(&ys, &f.targets, &mask, 0.5, Some(&f.weights), KlDirection::Forward).unwrap();
    assert!((v.loss - direct).abs() < 1e-12);
}

#[test]
fn mask_scaling() {
    let v = vec![0.5, -1.25, 3.0];
    let scaled = client_mask_scale(&v, 0.1, 200).unwrap();
    for (s, m) in scaled.iter().zip(&v) {
        assert!((s - 2000.0 * m).abs() < 1e-9);
    }
    assert_eq!(client_mask_scale(&v, 1.0, 1).unwrap(), v);
    let back = client_mask_unscale(&scaled, 0.1, 200).unwrap();
    for (b, m) in back.iter().zip(&v) {
        assert!((b - m).abs() < 1e-12);
    }
    assert!(client_mask_scale(&v, 0.0, 3).is_err());
    assert!(client_mask_scale(&v, 0.1, 0).is_err());
}

#[test]
fn config_invariants() {
    assert!(ForsakenConfig::default().validate().is_ok());
    for bad in [
        ForsakenConfig { iterations: 0, ..Default::default() },
        ForsakenConfig { xi: 0.0, ..Default::default() },
        ForsakenConfig { lambda: -1.0, ..Default::default() },
        ForsakenConfig { d0_fraction: 0.2, ..Default::default() },
        ForsakenConfig { optimizer: OptimizerKind::Sgd, ..Default::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}

fn trained_scenario() -> (ScenarioDataset, ModelSpec, ParamVector) {
    let ds = build_scenario(&ScenarioSpec {
        kind: ScenarioKind::OodForeign,
        n_train: 300,
        n_test: 200,
        n_unlearn: 30,
        n_reference: 60,
        n_classes: 3,
        input_dim: 6,
        seed: 4,
        ..ScenarioSpec::default()
    })
    .unwrap();
    let spec = ModelSpec::new(vec![6, 16, 3], 2);
    let idx = ds.training_indices();
    let config = TrainConfig {
        epochs: 60,
        batch_size: 16,
        learning_rate: 0.01,
        ..TrainConfig::default()
    };
    let theta = train(&build_model(&spec).unwrap(), &spec, &config, TrainData::new(&ds.x, &ds.labels, &idx)).unwrap();
    (ds, spec, theta)
}

#[test]
fn early_exit_leaves_parameters_untouched() {
    let (ds, spec, theta) = trained_scenario();
    let config = ForsakenConfig {
        early_stop_kl: 1e6,
        ..ForsakenConfig::default()
    };
    let out = run_forsaken(&theta, &spec, &ds, &config).unwrap();
    assert_eq!(out.iterations, 0);
    assert_eq!(out.params, theta);
    assert_eq!(out.trace.len(), 1);
}

#[test]
fn unlearning_reduces_divergence() {
    let (ds, spec, theta) = trained_scenario();
    let out = run_forsaken(&theta, &spec, &ds, &ForsakenConfig::default()).unwrap();
    let first = out.trace.first().unwrap().mean_kl;
    let last = out.trace.last().unwrap().mean_kl;
    assert!(out.iterations >= 1);
    assert!(last < first, "{first} -> {last}");
    let delta: Vec<f64> = theta.values().iter().zip(out.params.values()).map(|(a, b)| a - b).collect();
    for (d, m) in delta.iter().zip(out.mask.applied()) {
        assert!((d - m).abs() < 1e-12);
    }
    let again = run_forsaken(&theta, &spec, &ds, &ForsakenConfig::default()).unwrap();
    assert_eq!(again.params, out.params);
}

#[test]
fn lbfgs_without_penalty_is_monotone() {
    let (ds, spec, theta) = trained_scenario();
    let config = ForsakenConfig {
        lambda: 0.0,
        early_stop_kl: 0.0,
        iterations: 15,
        ..ForsakenConfig::default()
    };
    let out = run_forsaken(&theta, &spec, &ds, &config).unwrap();
    for w in out.trace.windows(2) {
        assert!(w[1].loss <= w[0].loss + 1e-12, "{} -> {}", w[0].loss, w[1].loss);
    }
}

#[test]
fn adam_variant_runs() {
    let (ds, spec, theta) = trained_scenario();
    let config = ForsakenConfig {
        optimizer: OptimizerKind::Adam,
        kl_direction: KlDirection::Reverse,
        scalar_penalty_weight: true,
        ..ForsakenConfig::default()
    };
    let out = run_forsaken(&theta, &spec, &ds, &config).unwrap();
    assert!(out.trace.last().unwrap().mean_kl < out.trace[0].mean_kl);
}

#[test]
fn trace_csv_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    let rows = [TraceRow {
        iter: 0,
        loss: 1.0,
        mean_kl: 0.5,
        test_acc: None,
        mask_l1: 0.0,
    }];
    write_trace_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, "iter,loss,mean_kl,test_acc,mask_l1\n0,1.0,0.5,,0.0\n");
}
