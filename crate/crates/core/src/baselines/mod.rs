//! Comparison unlearning methods: full retraining, summation-based
//! unlearning (SMU) and sharded, sliced retraining (SISA).

mod sisa;
mod smu;

pub use sisa::{sisa_predict, sisa_train, sisa_unlearn, vote, SisaConfig, SisaEnsemble, SisaUnlearnStats};
pub use smu::{smu_forget, smu_record, smu_unlearn, GradientLedger, SmuRecord};

use crate::data::ScenarioDataset;
use crate::error::{Error, Result};
use crate::nn::{build_model, train, ModelSpec, ParamVector, TrainConfig, TrainData};

/// Fresh initialisation and full training on the retained samples.
pub fn retrain_full(dataset: &ScenarioDataset, spec: &ModelSpec, config: &TrainConfig) -> Result<ParamVector> {
    let retained = dataset.retained_indices();
    if retained.is_empty() {
        return Err(Error::Empty("retained training samples"));
    }
    train(&build_model(spec)?, spec, config, TrainData::new(&dataset.x, &dataset.labels, &retained))
}

/// The target model: fresh initialisation trained on `train ∪ unlearn`.
pub fn train_target(dataset: &ScenarioDataset, spec: &ModelSpec, config: &TrainConfig) -> Result<ParamVector> {
    let idx = dataset.training_indices();
    train(&build_model(spec)?, spec, config, TrainData::new(&dataset.x, &dataset.labels, &idx))
}
