//! Black-box shadow-model membership oracle.
//!
//! A shadow model with the target's architecture is trained on the
//! `shadow_train` role. Its sorted posteriors on `shadow_train` (members)
//! and `shadow_test` (non-members) train a boosted-tree attack classifier,
//! which is then applied to the target model's posteriors.

mod gbdt;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use gbdt::{BoostConfig, Gbdt, Tree};

use crate::codec::{self, Reader};
use crate::data::{Role, ScenarioDataset};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{build_model, forward_batch, train, ModelSpec, ParamVector, Posterior, TrainConfig, TrainData};
use crate::rng;

pub const ORACLE_MAGIC: &[u8; 4] = b"FSKO";
pub const ORACLE_VERSION: u32 = 1;

/// Where an oracle came from; empty layers when trained on raw features.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleMetadata {
    pub shadow_layers: Vec<usize>,
    pub shadow_seed: u64,
    pub attack_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MembershipOracle {
    pub model: Gbdt,
    pub threshold: f64,
    pub metadata: OracleMetadata,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Membership {
    pub member: bool,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleQuality {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Trains the shadow model on the `shadow_train` role with the given spec
/// and training configuration.
pub fn train_shadow(dataset: &ScenarioDataset, spec: &ModelSpec, config: &TrainConfig) -> Result<ParamVector> {
    spec.validate()?;
    if spec.input_dim() != dataset.input_dim() || spec.output_dim() != dataset.n_classes() {
        return Err(Error::InvalidSpec(format!(
            "shadow spec {:?} does not fit data with {} features and {} classes",
            spec.layer_sizes,
            dataset.input_dim(),
            dataset.n_classes()
        )));
    }
    let idx = dataset.indices(Role::ShadowTrain);
    if idx.is_empty() {
        return Err(Error::Empty("shadow_train role"));
    }
    let init = build_model(spec)?;
    train(&init, spec, config, TrainData::new(&dataset.x, &dataset.labels, &idx))
}

/// Posterior sorted in descending order.
pub fn extract_features(posterior: &Posterior) -> Vec<f64> {
    let mut f = posterior.probs().to_vec();
    f.sort_by(|a, b| b.total_cmp(a));
    f
}

pub fn train_attack_classifier(members: &[Vec<f64>], nonmembers: &[Vec<f64>], seed: u64) -> Result<MembershipOracle> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::invalid("attack classifier needs both member and non-member features"));
    }
    let x: Vec<Vec<f64>> = members.iter().chain(nonmembers).cloned().collect();
    let y: Vec<bool> = (0..x.len()).map(|i| i < members.len()).collect();
    let model = Gbdt::fit(&x, &y, &BoostConfig::default(), seed)?;
    Ok(MembershipOracle {
        model,
        threshold: 0.5,
        metadata: OracleMetadata {
            attack_seed: seed,
            ..OracleMetadata::default()
        },
    })
}

fn features_of(params: &ParamVector, spec: &ModelSpec, x: &Matrix) -> Result<Vec<Vec<f64>>> {
    Ok(forward_batch(params, spec, x)?.iter().map(extract_features).collect())
}

/// Shadow training plus attack fitting. Members are subsampled (seeded) to
/// the size of `shadow_test` so both classes carry equal weight.
pub fn build_oracle(
    dataset: &ScenarioDataset,
    spec: &ModelSpec,
    config: &TrainConfig,
    seed: u64,
) -> Result<(MembershipOracle, ParamVector)> {
    let shadow = train_shadow(dataset, spec, config)?;
    let mut rng = rng::seeded(rng::derive_seed(seed, "oracle_balance"));
    let (members, nonmembers) = balanced(
        &dataset.indices(Role::ShadowTrain),
        &dataset.indices(Role::ShadowTest),
        &mut rng,
    );
    if nonmembers.is_empty() {
        return Err(Error::Empty("shadow_test role"));
    }
    let member_feats = features_of(&shadow, spec, &dataset.x.select_rows(&members))?;
    let nonmember_feats = features_of(&shadow, spec, &dataset.x.select_rows(&nonmembers))?;
    let mut oracle = train_attack_classifier(&member_feats, &nonmember_feats, seed)?;
    oracle.metadata.shadow_layers = spec.layer_sizes.clone();
    oracle.metadata.shadow_seed = spec.seed;
    Ok((oracle, shadow))
}

fn balanced(a: &[usize], b: &[usize], rng: &mut rng::Rng) -> (Vec<usize>, Vec<usize>) {
    let k = a.len().min(b.len());
    let pick = |s: &[usize], rng: &mut rng::Rng| {
        if s.len() > k {
            rng::sample_sorted(s, k, rng)
        } else {
            s.to_vec()
        }
    };
    let a = pick(a, rng);
    let b = pick(b, rng);
    (a, b)
}

impl MembershipOracle {
    pub fn feature_dim(&self) -> usize {
        self.model.feature_dim
    }

    pub fn infer(&self, posterior: &Posterior) -> Result<Membership> {
        infer_membership(self, posterior)
    }

    pub fn infer_batch(&self, posteriors: &[Posterior]) -> Result<Vec<Membership>> {
        posteriors.iter().map(|p| infer_membership(self, p)).collect()
    }

    /// Verdicts for the target model's posteriors on rows of `x`.
    pub fn verdicts(&self, params: &ParamVector, spec: &ModelSpec, x: &Matrix) -> Result<Vec<bool>> {
        let posteriors = forward_batch(params, spec, x)?;
        Ok(self.infer_batch(&posteriors)?.into_iter().map(|m| m.member).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(ORACLE_MAGIC);
        codec::put_u32(&mut out, ORACLE_VERSION);
        codec::put_f64(&mut out, self.threshold);
        codec::put_len(&mut out, self.metadata.shadow_layers.len())?;
        for &d in &self.metadata.shadow_layers {
            codec::put_len(&mut out, d)?;
        }
        codec::put_u64(&mut out, self.metadata.shadow_seed);
        codec::put_u64(&mut out, self.metadata.attack_seed);
        let m = &self.model;
        codec::put_len(&mut out, m.feature_dim)?;
        codec::put_f64(&mut out, m.base_score);
        codec::put_f64(&mut out, m.shrinkage);
        let depth = m.trees.first().map_or(0, Tree::depth);
        codec::put_len(&mut out, depth)?;
        codec::put_len(&mut out, m.trees.len())?;
        for t in &m.trees {
            if t.depth() != depth {
                return Err(Error::Format("trees of mixed depth".into()));
            }
            t.features.iter().for_each(|&f| codec::put_u32(&mut out, f));
            t.thresholds.iter().for_each(|&v| codec::put_f64(&mut out, v));
            t.leaves.iter().for_each(|&v| codec::put_f64(&mut out, v));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != ORACLE_MAGIC {
            return Err(Error::Format("bad oracle magic".into()));
        }
        let version = r.u32()?;
        if version != ORACLE_VERSION {
            return Err(Error::Format(format!("unsupported oracle version {version}")));
        }
        let threshold = r.f64()?;
        let n_layers = r.u32()? as usize;
        if 4 * n_layers > r.remaining() {
            return Err(Error::Format("truncated stream: layer list".into()));
        }
        let shadow_layers = (0..n_layers).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let shadow_seed = r.u64()?;
        let attack_seed = r.u64()?;
        let feature_dim = r.u32()? as usize;
        let base_score = r.f64()?;
        let shrinkage = r.f64()?;
        let depth = r.u32()? as usize;
        if depth > 16 {
            return Err(Error::Format(format!("implausible tree depth {depth}")));
        }
        let n_trees = r.u32()? as usize;
        let internal = (1usize << depth) - 1;
        let per_tree = 4 * internal + 8 * internal + 8 * (internal + 1);
        if n_trees.saturating_mul(per_tree) > r.remaining() {
            return Err(Error::Format("truncated stream: tree arrays".into()));
        }
        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            let features: Vec<u32> = (0..internal).map(|_| r.u32()).collect::<Result<_>>()?;
            if features.iter().any(|&f| f as usize >= feature_dim) {
                return Err(Error::Format("tree split feature out of range".into()));
            }
            trees.push(Tree {
                features,
                thresholds: r.f64s(internal)?,
                leaves: r.f64s(internal + 1)?,
            });
        }
        r.finish()?;
        Ok(MembershipOracle {
            model: Gbdt {
                base_score,
                shrinkage,
                feature_dim,
                trees,
            },
            threshold,
            metadata: OracleMetadata {
                shadow_layers,
                shadow_seed,
                attack_seed,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Score σ(F) of the sorted posterior; member iff `score >= threshold`.
pub fn infer_membership(oracle: &MembershipOracle, posterior: &Posterior) -> Result<Membership> {
    if oracle.model.trees.is_empty() {
        return Err(Error::Undefined("oracle has not been trained"));
    }
    if posterior.len() != oracle.feature_dim() {
        return Err(Error::DimensionMismatch {
            expected: oracle.feature_dim(),
            got: posterior.len(),
        });
    }
    let score = oracle.model.score(&extract_features(posterior));
    Ok(Membership {
        member: score >= oracle.threshold,
        score,
    })
}

pub(crate) fn quality(truth: &[bool], predicted: &[bool]) -> OracleQuality {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut correct = 0usize;
    let positives = truth.iter().filter(|&&t| t).count();
    for (&t, &p) in truth.iter().zip(predicted) {
        if t == p {
            correct += 1;
        }
        match (t, p) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    OracleQuality {
        accuracy: ratio(correct, truth.len()),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, positives),
    }
}

/// Oracle quality against the target model: `train` samples are members,
/// `test` samples non-members; the larger side is subsampled with `seed`.
pub fn evaluate_oracle(
    oracle: &MembershipOracle,
    target: &ParamVector,
    spec: &ModelSpec,
    dataset: &ScenarioDataset,
    seed: u64,
) -> Result<OracleQuality> {
    let mut rng = rng::seeded(rng::derive_seed(seed, "oracle_eval"));
    let (members, nonmembers) = balanced(
        &dataset.indices(Role::Train),
        &dataset.indices(Role::Test),
        &mut rng,
    );
    if members.is_empty() {
        return Err(Error::Empty("train or test role"));
    }
    let mut predicted = oracle.verdicts(target, spec, &dataset.x.select_rows(&members))?;
    predicted.extend(oracle.verdicts(target, spec, &dataset.x.select_rows(&nonmembers))?);
    let truth: Vec<bool> = (0..predicted.len()).map(|i| i < members.len()).collect();
    Ok(quality(&truth, &predicted))
}

/// Writes `role,score,verdict,p0..` for each probe.
pub fn write_probe_csv(path: &Path, oracle: &MembershipOracle, probes: &[(Role, Posterior)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let p = oracle.feature_dim();
    let mut header = vec!["role".to_string(), "score".into(), "verdict".into()];
    header.extend((0..p).map(|j| format!("p{j}")));
    w.write_record(&header)?;
    for (role, post) in probes {
        let m = infer_membership(oracle, post)?;
        let mut rec = vec![
            role.name().to_string(),
            format!("{:?}", m.score),
            if m.member { "member" } else { "nonmember" }.to_string(),
        ];
        rec.extend(post.probs().iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
