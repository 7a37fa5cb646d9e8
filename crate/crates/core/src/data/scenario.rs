use rand::Rng as _;

use super::mixture::{balanced_labels, gaussian_vector, sample_around, Mixture};
use super::{Origin, Role, ScenarioDataset, ScenarioKind, ScenarioSpec};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, Rng};

fn empty_dataset(spec: &ScenarioSpec, mixture: Option<Mixture>) -> ScenarioDataset {
    ScenarioDataset {
        x: Matrix::zeros(0, spec.input_dim),
        labels: Vec::new(),
        clean_labels: Vec::new(),
        roles: Vec::new(),
        origins: Vec::new(),
        spec: spec.clone(),
        mixture,
    }
}

fn push_task_samples(ds: &mut ScenarioDataset, mixture: &Mixture, classes: usize, n: usize, role: Role, rng: &mut Rng) -> Result<()> {
    for label in balanced_labels(classes, n, rng) {
        let row = mixture.sample(label, rng);
        ds.push(&row, label, label, role, Origin::Task)?;
    }
    Ok(())
}

/// A label in `0..p` other than `avoid`.
fn other_label(avoid: usize, p: usize, rng: &mut Rng) -> usize {
    (avoid + 1 + rng.random_range(0..p - 1)) % p
}

/// ID train and test pools drawn from `spec.n_classes` task clusters.
pub fn base_dataset(spec: &ScenarioSpec) -> Result<ScenarioDataset> {
    spec.validate()?;
    let mut rng = rng::seeded(rng::derive_seed(spec.seed, "scenario"));
    let mixture = Mixture::random(spec.n_classes, spec.input_dim, spec.spread, &mut rng);
    let mut ds = empty_dataset(spec, Some(mixture.clone()));
    push_task_samples(&mut ds, &mixture, spec.n_classes, spec.n_train, Role::Train, &mut rng)?;
    push_task_samples(&mut ds, &mixture, spec.n_classes, spec.n_test, Role::Test, &mut rng)?;
    Ok(ds)
}

/// Builds an OOD unlearning scenario. The first `n_unlearn` OOD samples are
/// tagged `unlearn` (and are trained on); `n_reference` further OOD samples
/// from the same source are tagged `reference`.
pub fn build_ood_scenario(spec: &ScenarioSpec) -> Result<ScenarioDataset> {
    if !spec.kind.is_ood() {
        return Err(Error::invalid(format!("{} is not an OOD scenario kind", spec.kind)));
    }
    spec.validate()?;
    let p = spec.n_classes;
    let mut rng = rng::seeded(rng::derive_seed(spec.seed, "scenario"));
    let total_clusters = match spec.kind {
        ScenarioKind::OodLabelsplit => p + spec.ood_clusters,
        _ => p,
    };
    let all = Mixture::random(total_clusters, spec.input_dim, spec.spread, &mut rng);
    let task = Mixture {
        centers: all.centers[..p].to_vec(),
        spread: spec.spread,
    };
    let mut ds = empty_dataset(spec, Some(task.clone()));
    push_task_samples(&mut ds, &task, p, spec.n_train, Role::Train, &mut rng)?;
    push_task_samples(&mut ds, &task, p, spec.n_test, Role::Test, &mut rng)?;

    let n_ood = spec.n_unlearn + spec.n_reference;
    let roles = (0..n_ood).map(|i| if i < spec.n_unlearn { Role::Unlearn } else { Role::Reference });
    match spec.kind {
        ScenarioKind::OodMislabel => {
            let shifts: Vec<Vec<f64>> = (0..p)
                .map(|_| {
                    let dir = gaussian_vector(spec.input_dim, &mut rng);
                    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                    dir.iter().map(|v| v * spec.shift / norm).collect()
                })
                .collect();
            for role in roles {
                let source = rng.random_range(0..p);
                let center: Vec<f64> = task.centers[source].iter().zip(&shifts[source]).map(|(c, s)| c + s).collect();
                let row = sample_around(&center, spec.spread, &mut rng);
                let label = other_label(source, p, &mut rng);
                ds.push(&row, label, label, role, Origin::ShiftedCopy)?;
            }
        }
        ScenarioKind::OodForeign => {
            let gap = 0.5 * task.min_center_gap().min(2.0 * (spec.input_dim as f64).sqrt());
            let foreign = Mixture {
                centers: task.disjoint_centers(spec.ood_clusters, gap, &mut rng),
                spread: spec.spread,
            };
            for role in roles {
                let cluster = rng.random_range(0..foreign.clusters());
                let row = foreign.sample(cluster, &mut rng);
                let label = rng.random_range(0..p);
                ds.push(&row, label, label, role, Origin::Foreign)?;
            }
        }
        ScenarioKind::OodLabelsplit => {
            for role in roles {
                let cluster = p + rng.random_range(0..spec.ood_clusters);
                let row = all.sample(cluster, &mut rng);
                let label = rng.random_range(0..p);
                ds.push(&row, label, label, role, Origin::HeldOutClass)?;
            }
        }
        ScenarioKind::Id | ScenarioKind::Poison => unreachable!("checked above"),
    }
    Ok(ds)
}

/// Moves half of the `train` pool to `shadow_train` and an equally sized
/// part of the `test` pool to `shadow_test`.
pub fn split_shadow(dataset: &ScenarioDataset, seed: u64) -> Result<ScenarioDataset> {
    let train = dataset.indices(Role::Train);
    let test = dataset.indices(Role::Test);
    if train.len() < 2 || test.len() < 2 {
        return Err(Error::invalid(format!(
            "shadow split needs at least two train and two test samples, have {} and {}",
            train.len(),
            test.len()
        )));
    }
    let mut rng = rng::seeded(rng::derive_seed(seed, "shadow_split"));
    let n_shadow = train.len() / 2;
    let n_shadow_test = n_shadow.min(test.len() / 2);
    let mut out = dataset.clone();
    for i in rng::sample_sorted(&train, n_shadow, &mut rng) {
        out.roles[i] = Role::ShadowTrain;
    }
    for i in rng::sample_sorted(&test, n_shadow_test, &mut rng) {
        out.roles[i] = Role::ShadowTest;
    }
    Ok(out)
}

/// Tags `n_unlearn` uniformly chosen training samples as `unlearn` (ID kind).
pub fn select_unlearn_set(dataset: &ScenarioDataset, n_unlearn: usize, seed: u64) -> Result<ScenarioDataset> {
    if dataset.spec.kind != ScenarioKind::Id {
        return Err(Error::invalid("unlearn-set selection applies to the id scenario kind"));
    }
    let train = dataset.indices(Role::Train);
    if n_unlearn > train.len() {
        return Err(Error::invalid(format!(
            "requested {n_unlearn} unlearn samples from {} training samples",
            train.len()
        )));
    }
    let mut rng = rng::seeded(rng::derive_seed(seed, "unlearn_select"));
    let mut out = dataset.clone();
    for i in rng::sample_sorted(&train, n_unlearn, &mut rng) {
        out.roles[i] = Role::Unlearn;
    }
    Ok(out)
}

/// Flips the label of `fraction` of the source-class training samples to
/// the target class and tags them `unlearn`. The same number of clean,
/// never-trained samples of the source class are added as `reference`.
pub fn poison_labels(dataset: &ScenarioDataset, pair: (usize, usize), fraction: f64, seed: u64) -> Result<ScenarioDataset> {
    let (source, target) = pair;
    let p = dataset.n_classes();
    if source == target || source >= p || target >= p {
        return Err(Error::invalid(format!("invalid poison pair {source}->{target} for {p} classes")));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("poison fraction must be in (0, 1]"));
    }
    let candidates: Vec<usize> = dataset
        .indices(Role::Train)
        .into_iter()
        .filter(|&i| dataset.labels[i] == source)
        .collect();
    if candidates.is_empty() {
        return Err(Error::Empty("source-class training samples"));
    }
    let count = ((fraction * candidates.len() as f64).round() as usize).clamp(1, candidates.len());
    let mut rng = rng::seeded(rng::derive_seed(seed, "poison"));
    let mut out = dataset.clone();
    for i in rng::sample_sorted(&candidates, count, &mut rng) {
        out.labels[i] = target;
        out.roles[i] = Role::Unlearn;
        out.origins[i] = Origin::Poisoned;
    }
    match dataset.mixture.clone() {
        Some(mixture) => {
            for _ in 0..count {
                let row = mixture.sample(source, &mut rng);
                out.push(&row, source, source, Role::Reference, Origin::CleanReference)?;
            }
        }
        None => {
            let spare: Vec<usize> = dataset
                .indices(Role::Test)
                .into_iter()
                .filter(|&i| dataset.labels[i] == source)
                .collect();
            if spare.len() < count {
                return Err(Error::invalid(format!(
                    "need {count} clean source-class test samples for the reference set, have {}",
                    spare.len()
                )));
            }
            for i in rng::sample_sorted(&spare, count, &mut rng) {
                out.roles[i] = Role::Reference;
            }
        }
    }
    Ok(out)
}

/// Indices of the non-member samples used to estimate unlearning targets:
/// held-out OOD samples for OOD kinds, a seeded sample of `test` for the
/// ID kind, and the clean stand-ins for the poison kind.
pub fn sample_reference_set(dataset: &ScenarioDataset) -> Result<Vec<usize>> {
    let out = match dataset.spec.kind {
        ScenarioKind::Id => {
            let test = dataset.indices(Role::Test);
            let k = dataset.spec.n_reference.min(test.len());
            let mut rng = rng::seeded(rng::derive_seed(dataset.spec.seed, "reference"));
            rng::sample_sorted(&test, k, &mut rng)
        }
        _ => dataset.indices(Role::Reference),
    };
    if out.is_empty() {
        return Err(Error::Empty("reference set"));
    }
    Ok(out)
}

/// Full scenario construction in pipeline order: generate, split off the
/// shadow halves, then pick the unlearn set.
pub fn build_scenario(spec: &ScenarioSpec) -> Result<ScenarioDataset> {
    spec.validate()?;
    let split_seed = rng::derive_seed(spec.seed, "split");
    match spec.kind {
        k if k.is_ood() => split_shadow(&build_ood_scenario(spec)?, split_seed),
        ScenarioKind::Id => {
            let split = split_shadow(&base_dataset(spec)?, split_seed)?;
            select_unlearn_set(&split, spec.n_unlearn, spec.seed)
        }
        _ => {
            let split = split_shadow(&base_dataset(spec)?, split_seed)?;
            poison_labels(&split, spec.poison_pair, spec.poison_fraction, spec.seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ScenarioKind) -> ScenarioSpec {
        ScenarioSpec {
            kind,
            n_train: 200,
            n_test: 100,
            n_unlearn: 20,
            n_reference: 30,
            n_classes: 4,
            input_dim: 5,
            seed: 17,
            poison_pair: (1, 3),
            ..ScenarioSpec::default()
        }
    }

    fn assert_partition(ds: &ScenarioDataset) {
        ds.validate().unwrap();
        let total: usize = Role::ALL.iter().map(|&r| ds.count(r)).sum();
        assert_eq!(total, ds.len());
    }

    #[test]
    fn ood_kinds_build() {
        for kind in [ScenarioKind::OodMislabel, ScenarioKind::OodForeign, ScenarioKind::OodLabelsplit] {
            let ds = build_scenario(&small(kind)).unwrap();
            assert_partition(&ds);
            assert_eq!(ds.count(Role::Unlearn), 20);
            assert_eq!(ds.count(Role::Reference), 30);
            assert_eq!(ds.count(Role::ShadowTrain), 100);
            assert_eq!(ds.count(Role::Train), 100);
            // unlearn samples are part of what the target trains on
            let training = ds.training_indices();
            assert!(ds.indices(Role::Unlearn).iter().all(|i| training.contains(i)));
            assert!(ds.labels.iter().all(|&l| l < 4));
        }
    }

    #[test]
    fn labelsplit_without_held_out_classes_fails() {
        let spec = ScenarioSpec {
            ood_clusters: 0,
            ..small(ScenarioKind::OodLabelsplit)
        };
        assert!(build_ood_scenario(&spec).is_err());
    }

    #[test]
    fn ood_builder_rejects_other_kinds() {
        assert!(build_ood_scenario(&small(ScenarioKind::Id)).is_err());
    }

    #[test]
    fn foreign_clusters_are_away_from_task() {
        let spec = small(ScenarioKind::OodForeign);
        let mut rng = rng::seeded(1);
        let task = Mixture::random(4, 5, 1.0, &mut rng);
        let foreign = task.disjoint_centers(3, 0.5, &mut rng);
        for f in &foreign {
            for t in &task.centers {
                let d: f64 = f.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(d > 0.0);
            }
        }
        let ds = build_ood_scenario(&spec).unwrap();
        assert!(ds
            .indices(Role::Unlearn)
            .iter()
            .all(|&i| ds.origins[i] == Origin::Foreign));
    }

    #[test]
    fn deterministic_builds() {
        for kind in ScenarioKind::ALL {
            let a = build_scenario(&small(kind)).unwrap();
            let b = build_scenario(&small(kind)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn id_selection() {
        let base = split_shadow(&base_dataset(&small(ScenarioKind::Id)).unwrap(), 3).unwrap();
        let train = base.indices(Role::Train);
        let all = select_unlearn_set(&base, train.len(), 1).unwrap();
        assert_eq!(all.count(Role::Train), 0);
        assert_eq!(all.count(Role::Unlearn), train.len());

        let a = select_unlearn_set(&base, 10, 1).unwrap();
        let b = select_unlearn_set(&base, 10, 1).unwrap();
        let c = select_unlearn_set(&base, 10, 2).unwrap();
        assert_eq!(a.indices(Role::Unlearn), b.indices(Role::Unlearn));
        assert_ne!(a.indices(Role::Unlearn), c.indices(Role::Unlearn));
        assert!(a.indices(Role::Unlearn).iter().all(|i| train.contains(i)));
        assert!(select_unlearn_set(&base, train.len() + 1, 1).is_err());
    }

    #[test]
    fn id_reference_comes_from_test() {
        let ds = build_scenario(&small(ScenarioKind::Id)).unwrap();
        let reference = sample_reference_set(&ds).unwrap();
        let test = ds.indices(Role::Test);
        assert_eq!(reference.len(), 30);
        assert!(reference.iter().all(|i| test.contains(i)));
    }

    #[test]
    fn ood_reference_role() {
        let ds = build_scenario(&small(ScenarioKind::OodForeign)).unwrap();
        let reference = sample_reference_set(&ds).unwrap();
        assert!(reference.iter().all(|&i| ds.roles[i] == Role::Reference));
    }

    #[test]
    fn poisoning_flips_exactly_the_source_class() {
        let spec = small(ScenarioKind::Poison);
        let base = split_shadow(&base_dataset(&spec).unwrap(), 3).unwrap();
        let source_train: Vec<usize> = base
            .indices(Role::Train)
            .into_iter()
            .filter(|&i| base.labels[i] == 1)
            .collect();
        let poisoned = poison_labels(&base, (1, 3), 1.0, 5).unwrap();
        for i in 0..base.len() {
            let flipped = poisoned.labels[i] != poisoned.clean_labels[i];
            assert_eq!(flipped, source_train.contains(&i), "sample {i}");
            if !source_train.contains(&i) {
                assert_eq!(poisoned.labels[i], base.labels[i]);
            }
        }
        let reference = sample_reference_set(&poisoned).unwrap();
        assert_eq!(reference.len(), source_train.len());
        assert!(reference.iter().all(|&i| poisoned.labels[i] == 1));
    }

    #[test]
    fn poison_grid_fractions() {
        let spec = small(ScenarioKind::Poison);
        let base = split_shadow(&base_dataset(&spec).unwrap(), 3).unwrap();
        for fraction in [0.02, 0.04, 0.10] {
            let ds = poison_labels(&base, (0, 2), fraction, 9).unwrap();
            assert!(ds.count(Role::Unlearn) >= 1);
            assert_eq!(ds.count(Role::Unlearn), sample_reference_set(&ds).unwrap().len());
        }
        assert!(poison_labels(&base, (0, 0), 0.1, 9).is_err());
        assert!(poison_labels(&base, (0, 2), 0.0, 9).is_err());
    }

    #[test]
    fn poison_without_source_samples_fails() {
        let spec = small(ScenarioKind::Poison);
        let mut base = base_dataset(&spec).unwrap();
        for r in base.roles.iter_mut() {
            if *r == Role::Train {
                *r = Role::Test;
            }
        }
        assert!(matches!(poison_labels(&base, (0, 1), 0.5, 1), Err(Error::Empty(_))));
    }

    #[test]
    fn shadow_split_halves_and_is_disjoint() {
        let spec = ScenarioSpec {
            n_train: 1000,
            n_test: 600,
            ..small(ScenarioKind::Id)
        };
        let base = base_dataset(&spec).unwrap();
        let a = split_shadow(&base, 4).unwrap();
        assert_eq!(a.count(Role::ShadowTrain), 500);
        assert_eq!(a.count(Role::ShadowTest), 300);
        assert_eq!(a, split_shadow(&base, 4).unwrap());
        let train = a.indices(Role::Train);
        assert!(a.indices(Role::ShadowTrain).iter().all(|i| !train.contains(i)));
        let mut tiny = base.clone();
        tiny.roles.iter_mut().for_each(|r| *r = Role::Test);
        assert!(split_shadow(&tiny, 1).is_err());
    }
}
