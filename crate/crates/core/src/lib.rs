//! Machine unlearning laboratory: neuron masking with mask gradients,
//! forgetting-rate auditing through a shadow-model membership oracle,
//! retraining / summation / sharded baselines, and a federated round
//! simulator, all on seeded synthetic data.

mod codec;
pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fedsim;
pub mod forsaken;
pub mod matrix;
pub mod membership;
pub mod metrics;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
pub use matrix::Matrix;
