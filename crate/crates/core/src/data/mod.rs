//! Synthetic classification data and unlearning scenarios.
//!
//! A [`ScenarioDataset`] tags every sample with exactly one [`Role`]. The
//! target model is trained on `train` plus `unlearn` samples; `unlearn`
//! samples are the ones later removed. `shadow_train` / `shadow_test` feed
//! the membership oracle and never reach the target model.

mod io;
mod mixture;
mod scenario;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use io::{dataset_from_table, dump_roles, load_csv};
pub use mixture::{gen_gaussian_mixture, Mixture};
pub use scenario::{
    base_dataset, build_ood_scenario, build_scenario, poison_labels, sample_reference_set, select_unlearn_set,
    split_shadow,
};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    OodMislabel,
    OodForeign,
    OodLabelsplit,
    Id,
    Poison,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::OodMislabel,
        ScenarioKind::OodForeign,
        ScenarioKind::OodLabelsplit,
        ScenarioKind::Id,
        ScenarioKind::Poison,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::OodMislabel => "ood_mislabel",
            ScenarioKind::OodForeign => "ood_foreign",
            ScenarioKind::OodLabelsplit => "ood_labelsplit",
            ScenarioKind::Id => "id",
            ScenarioKind::Poison => "poison",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_ood(self) -> bool {
        matches!(
            self,
            ScenarioKind::OodMislabel | ScenarioKind::OodForeign | ScenarioKind::OodLabelsplit
        )
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Test,
    Unlearn,
    Reference,
    ShadowTrain,
    ShadowTest,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::Train,
        Role::Test,
        Role::Unlearn,
        Role::Reference,
        Role::ShadowTrain,
        Role::ShadowTest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Test => "test",
            Role::Unlearn => "unlearn",
            Role::Reference => "reference",
            Role::ShadowTrain => "shadow_train",
            Role::ShadowTest => "shadow_test",
        }
    }
}

/// How a sample was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// Drawn from one of the task's class clusters.
    Task,
    /// Drawn from a shifted copy of a task cluster and given another label.
    ShiftedCopy,
    /// Drawn from a cluster disjoint from every task cluster.
    Foreign,
    /// Drawn from a cluster whose class was withheld from the task.
    HeldOutClass,
    /// Task sample whose label was flipped.
    Poisoned,
    /// Fresh clean sample standing in for a poisoned one.
    CleanReference,
    /// Loaded from an external table.
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    /// Size of the ID training pool before the shadow split halves it.
    pub n_train: usize,
    /// Size of the ID test pool before the shadow split halves it.
    pub n_test: usize,
    pub n_unlearn: usize,
    pub n_reference: usize,
    pub n_classes: usize,
    pub input_dim: usize,
    pub seed: u64,
    /// Standard deviation of every cluster around its center.
    pub spread: f64,
    /// Number of OOD clusters (foreign clusters or held-out classes).
    pub ood_clusters: usize,
    /// Distance between a task cluster and its shifted copy (mislabel kind).
    pub shift: f64,
    pub poison_fraction: f64,
    pub poison_pair: (usize, usize),
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            kind: ScenarioKind::OodForeign,
            n_train: 2000,
            n_test: 1000,
            n_unlearn: 200,
            n_reference: 500,
            n_classes: 5,
            input_dim: 20,
            seed: 0,
            spread: 1.0,
            ood_clusters: 3,
            shift: 2.0,
            poison_fraction: 0.1,
            poison_pair: (4, 2),
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if self.input_dim == 0 {
            return bad("input_dim must be positive");
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train and n_test must be positive");
        }
        if self.n_reference == 0 {
            return bad("n_reference must be positive");
        }
        if self.kind != ScenarioKind::Poison && self.n_unlearn == 0 {
            return bad("n_unlearn must be positive");
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return bad("spread must be a non-negative real");
        }
        if self.kind == ScenarioKind::Id && self.n_unlearn > self.n_train {
            return bad("n_unlearn exceeds the target training set");
        }
        if self.kind == ScenarioKind::Poison {
            let (s, t) = self.poison_pair;
            if s == t {
                return bad("poison pair classes must differ");
            }
            if s >= self.n_classes || t >= self.n_classes {
                return bad("poison pair class out of range");
            }
            if !(self.poison_fraction > 0.0 && self.poison_fraction <= 1.0) {
                return bad("poison_fraction must be in (0, 1]");
            }
        }
        if matches!(self.kind, ScenarioKind::OodForeign | ScenarioKind::OodLabelsplit) && self.ood_clusters == 0 {
            return bad("ood_clusters must be positive for this scenario kind");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioDataset {
    pub x: Matrix,
    pub labels: Vec<usize>,
    /// Labels before poisoning; equal to `labels` elsewhere.
    pub clean_labels: Vec<usize>,
    pub roles: Vec<Role>,
    pub origins: Vec<Origin>,
    pub spec: ScenarioSpec,
    /// Generator of the task clusters, when the data is synthetic.
    pub mixture: Option<Mixture>,
}

impl ScenarioDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn indices(&self, role: Role) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter_map(|(i, &r)| (r == role).then_some(i))
            .collect()
    }

    pub fn count(&self, role: Role) -> usize {
        self.roles.iter().filter(|&&r| r == role).count()
    }

    /// Samples the target model is trained on: `train` and `unlearn`.
    pub fn training_indices(&self) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter_map(|(i, &r)| matches!(r, Role::Train | Role::Unlearn).then_some(i))
            .collect()
    }

    /// Training samples with the unlearn set removed.
    pub fn retained_indices(&self) -> Vec<usize> {
        self.indices(Role::Train)
    }

    pub fn select(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.x.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Structural checks: aligned columns and every sample carrying one role.
    pub fn validate(&self) -> Result<()> {
        let n = self.x.rows();
        for (what, len) in [
            ("labels", self.labels.len()),
            ("clean_labels", self.clean_labels.len()),
            ("roles", self.roles.len()),
            ("origins", self.origins.len()),
        ] {
            if len != n {
                return Err(Error::invalid(format!("{what} has {len} entries for {n} samples")));
            }
        }
        if let Some(&label) = self.labels.iter().chain(&self.clean_labels).find(|&&l| l >= self.n_classes()) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.n_classes(),
            });
        }
        Ok(())
    }

    pub(crate) fn push(&mut self, row: &[f64], label: usize, clean: usize, role: Role, origin: Origin) -> Result<()> {
        self.x.push_row(row)?;
        self.labels.push(label);
        self.clean_labels.push(clean);
        self.roles.push(role);
        self.origins.push(origin);
        Ok(())
    }
}
