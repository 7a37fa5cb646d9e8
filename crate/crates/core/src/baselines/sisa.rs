use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ScenarioDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{argmax, build_model, checkpoint, forward_batch, train, ModelSpec, ParamVector, Posterior, TrainConfig, TrainData};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SisaConfig {
    pub shards: usize,
    pub slices: usize,
    /// Seed of the sample-to-(shard, slice) hash.
    pub seed: u64,
}

impl Default for SisaConfig {
    fn default() -> Self {
        SisaConfig {
            shards: 10,
            slices: 5,
            seed: 0,
        }
    }
}

impl SisaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shards == 0 || self.slices == 0 {
            return Err(Error::invalid("SISA needs at least one shard and one slice"));
        }
        Ok(())
    }
}

/// Shard models with a checkpoint after every slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SisaEnsemble {
    pub spec: ModelSpec,
    pub train_config: TrainConfig,
    pub sisa: SisaConfig,
    /// Sample index → (shard, slice).
    pub assignment: BTreeMap<usize, (usize, usize)>,
    /// `checkpoints[shard][slice]`: parameters after training through `slice`.
    pub checkpoints: Vec<Vec<ParamVector>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SisaUnlearnStats {
    pub affected_shards: Vec<usize>,
    /// Number of (shard, slice) stages trained again.
    pub retrained_stages: usize,
}

fn sample_hash(seed: u64, index: usize) -> u64 {
    rng::mix64(rng::derive_seed(seed, "sisa_assign") ^ rng::mix64(index as u64))
}

fn assign(samples: &[usize], cfg: &SisaConfig) -> Result<BTreeMap<usize, (usize, usize)>> {
    let (s, r) = (cfg.shards, cfg.slices);
    if s * r > samples.len() {
        return Err(Error::invalid(format!(
            "{s} shards x {r} slices exceed {} training samples",
            samples.len()
        )));
    }
    let hashed: Vec<(usize, u64)> = samples.iter().map(|&i| (i, sample_hash(cfg.seed, i))).collect();
    let mut map: BTreeMap<usize, (usize, usize)> = hashed
        .iter()
        .map(|&(i, h)| (i, ((h % s as u64) as usize, ((h / s as u64) % r as u64) as usize)))
        .collect();
    let mut filled = vec![false; s * r];
    for &(shard, slice) in map.values() {
        filled[shard * r + slice] = true;
    }
    if filled.iter().any(|f| !f) {
        // round-robin in hash order keeps every cell populated
        let mut order = hashed;
        order.sort_by_key(|&(i, h)| (h, i));
        map = order
            .iter()
            .enumerate()
            .map(|(k, &(i, _))| (i, (k % s, (k / s) % r)))
            .collect();
    }
    Ok(map)
}

impl SisaEnsemble {
    fn epochs_per_stage(&self) -> usize {
        if self.sisa.slices == 1 {
            self.train_config.epochs
        } else {
            (self.train_config.epochs / self.sisa.slices).max(1)
        }
    }

    fn shard_spec(&self, shard: usize) -> ModelSpec {
        let mut spec = self.spec.clone();
        if shard > 0 {
            spec.seed = rng::derive_seed(self.spec.seed, "sisa_shard") ^ shard as u64;
        }
        spec
    }

    fn stage_config(&self, shard: usize, slice: usize) -> TrainConfig {
        let shuffle_seed = if shard == 0 && slice == 0 {
            self.train_config.shuffle_seed
        } else {
            rng::derive_seed(
                self.train_config.shuffle_seed ^ rng::mix64((shard * self.sisa.slices + slice) as u64),
                "sisa_stage",
            )
        };
        TrainConfig {
            epochs: self.epochs_per_stage(),
            shuffle_seed,
            ..self.train_config.clone()
        }
    }

    /// Ascending sample indices of `shard` in slices `0..=slice`.
    fn stage_samples(&self, shard: usize, slice: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .filter_map(|(&i, &(s, r))| (s == shard && r <= slice).then_some(i))
            .collect()
    }

    /// Trains `shard` from the checkpoint before `from_slice` onward.
    fn train_shard_from(&mut self, x: &Matrix, labels: &[usize], shard: usize, from_slice: usize) -> Result<usize> {
        let spec = self.shard_spec(shard);
        let mut params = if from_slice == 0 {
            build_model(&spec)?
        } else {
            self.checkpoints[shard][from_slice - 1].clone()
        };
        let mut stages = 0;
        for slice in from_slice..self.sisa.slices {
            let samples = self.stage_samples(shard, slice);
            if !samples.is_empty() {
                params = train(&params, &spec, &self.stage_config(shard, slice), TrainData::new(x, labels, &samples))?;
            }
            self.checkpoints[shard][slice] = params.clone();
            stages += 1;
        }
        Ok(stages)
    }

    pub fn checkpoint_count(&self) -> usize {
        self.checkpoints.iter().map(Vec::len).sum()
    }

    pub fn final_models(&self) -> impl Iterator<Item = &ParamVector> {
        self.checkpoints.iter().map(|c| c.last().expect("at least one slice"))
    }

    /// Writes `shard{S}_slice{R}.fskn` files and `manifest.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (s, shard) in self.checkpoints.iter().enumerate() {
            for (r, params) in shard.iter().enumerate() {
                checkpoint::save(&dir.join(format!("shard{s}_slice{r}.fskn")), params, &self.spec)?;
            }
        }
        let path = dir.join("manifest.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        w.write_record(["sample_index", "shard", "slice"])?;
        for (i, (s, r)) in &self.assignment {
            w.write_record([i.to_string(), s.to_string(), r.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, spec: &ModelSpec, train_config: &TrainConfig, sisa: &SisaConfig) -> Result<Self> {
        sisa.validate()?;
        let path = dir.join("manifest.csv");
        let mut reader = csv::Reader::from_path(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut assignment = BTreeMap::new();
        for rec in reader.deserialize::<(usize, usize, usize)>() {
            let (i, s, r) = rec?;
            if s >= sisa.shards || r >= sisa.slices {
                return Err(Error::Format(format!("manifest entry ({s}, {r}) outside the configured grid")));
            }
            assignment.insert(i, (s, r));
        }
        let checkpoints = (0..sisa.shards)
            .map(|s| {
                (0..sisa.slices)
                    .map(|r| checkpoint::load(&dir.join(format!("shard{s}_slice{r}.fskn")), spec))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SisaEnsemble {
            spec: spec.clone(),
            train_config: train_config.clone(),
            sisa: sisa.clone(),
            assignment,
            checkpoints,
        })
    }
}

/// Assigns the training samples (`train ∪ unlearn`) to shards and slices and
/// trains every shard slice by slice. Stage `r` trains on slices `0..=r` for
/// `max(1, K / R)` epochs, continuing from the previous checkpoint.
pub fn sisa_train(dataset: &ScenarioDataset, sisa: &SisaConfig, spec: &ModelSpec, config: &TrainConfig) -> Result<SisaEnsemble> {
    sisa.validate()?;
    spec.validate()?;
    config.validate()?;
    let samples = dataset.training_indices();
    let assignment = assign(&samples, sisa)?;
    let placeholder = build_model(spec)?;
    let mut ensemble = SisaEnsemble {
        spec: spec.clone(),
        train_config: config.clone(),
        sisa: sisa.clone(),
        assignment,
        checkpoints: vec![vec![placeholder; sisa.slices]; sisa.shards],
    };
    for shard in 0..sisa.shards {
        ensemble.train_shard_from(&dataset.x, &dataset.labels, shard, 0)?;
    }
    Ok(ensemble)
}

/// Removes `unlearn` from the assignment and retrains each affected shard
/// from the checkpoint preceding its earliest affected slice.
pub fn sisa_unlearn(
    ensemble: &SisaEnsemble,
    dataset: &ScenarioDataset,
    unlearn: &[usize],
) -> Result<(SisaEnsemble, SisaUnlearnStats)> {
    let mut earliest: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in unlearn {
        let &(s, r) = ensemble
            .assignment
            .get(&i)
            .ok_or_else(|| Error::invalid(format!("sample {i} is not part of the ensemble")))?;
        let e = earliest.entry(s).or_insert(r);
        *e = (*e).min(r);
    }
    let mut out = ensemble.clone();
    for i in unlearn {
        out.assignment.remove(i);
    }
    let mut stats = SisaUnlearnStats::default();
    for (&shard, &slice) in &earliest {
        stats.retrained_stages += out.train_shard_from(&dataset.x, &dataset.labels, shard, slice)?;
        stats.affected_shards.push(shard);
    }
    Ok((out, stats))
}

/// Majority vote over constituent argmaxes (ties to the lowest class) and
/// the renormalised mean posterior of the winning constituents.
pub fn vote(posteriors: &[Posterior]) -> Result<(Posterior, usize)> {
    let p = posteriors.first().ok_or(Error::Empty("ensemble votes"))?.len();
    let mut counts = vec![0.0; p];
    for post in posteriors {
        counts[post.argmax()] += 1.0;
    }
    let label = argmax(&counts);
    let mut mean = vec![0.0; p];
    for post in posteriors.iter().filter(|q| q.argmax() == label) {
        for (m, v) in mean.iter_mut().zip(post.probs()) {
            *m += v;
        }
    }
    let total: f64 = mean.iter().sum();
    let probs = mean.iter().map(|m| m / total).collect();
    Ok((Posterior::new(probs)?, label))
}

pub fn sisa_predict(ensemble: &SisaEnsemble, x: &Matrix) -> Result<Vec<(Posterior, usize)>> {
    let per_model = ensemble
        .final_models()
        .map(|params| forward_batch(params, &ensemble.spec, x))
        .collect::<Result<Vec<_>>>()?;
    (0..x.rows())
        .map(|row| {
            let votes: Vec<Posterior> = per_model.iter().map(|m| m[row].clone()).collect();
            vote(&votes)
        })
        .collect()
}
