//! Experiment configuration in a line-based `section.key = value` format.
//!
//! ```text
//! # comment
//! experiment.methods = forsaken,smu
//! scenario.kind = ood_foreign
//! forsaken.lambda = 10
//! ```

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::SisaConfig;
use crate::data::{ScenarioKind, ScenarioSpec};
use crate::error::{Error, Result};
use crate::forsaken::{ForsakenConfig, KlDirection};
use crate::nn::{Activation, ModelSpec, OptimizerKind, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Forsaken,
    Retrain,
    Smu,
    Sisa,
    None,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Forsaken, Method::Retrain, Method::Smu, Method::Sisa, Method::None];

    pub fn name(self) -> &'static str {
        match self {
            Method::Forsaken => "forsaken",
            Method::Retrain => "retrain",
            Method::Smu => "smu",
            Method::Sisa => "sisa",
            Method::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub trials: usize,
    /// Trial `i` uses seed `seed + i`.
    pub seed: u64,
    pub out: PathBuf,
    pub scenario: ScenarioSpec,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub training: TrainConfig,
    pub forsaken: ForsakenConfig,
    /// Ordinary epochs on the retained data after the SMU subtraction.
    pub smu_repair_epochs: usize,
    pub sisa: SisaConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            methods: Method::ALL.to_vec(),
            trials: 10,
            seed: 0,
            out: PathBuf::from("out"),
            scenario: ScenarioSpec {
                spread: 3.0,
                ..ScenarioSpec::default()
            },
            hidden: vec![256, 128],
            activation: Activation::Relu,
            training: TrainConfig {
                batch_size: 64,
                learning_rate: 0.003,
                ..TrainConfig::default()
            },
            forsaken: ForsakenConfig::default(),
            smu_repair_epochs: 1,
            sisa: SisaConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.seed.wrapping_add(trial as u64)
    }

    /// Model architecture for the configured scenario.
    pub fn model_spec(&self, seed: u64) -> ModelSpec {
        let mut layers = vec![self.scenario.input_dim];
        layers.extend(&self.hidden);
        layers.push(self.scenario.n_classes);
        ModelSpec::new(layers, seed).with_activation(self.activation)
    }

    pub fn validate(&self) -> Result<()> {
        // messages from nested validation usually start with the field name
        let known = serialize_config(self);
        let at = |section: &'static str| {
            let known = &known;
            move |e: Error| {
                let message = match e {
                    Error::InvalidArgument(m) => m,
                    other => other.to_string(),
                };
                let field = message.split_whitespace().next().unwrap_or_default();
                let key = format!("{section}.{field}");
                let key = if known.lines().any(|l| l.starts_with(&format!("{key} ="))) {
                    key
                } else {
                    section.to_string()
                };
                Error::ConfigValue { key, message }
            }
        };
        if self.methods.is_empty() {
            return Err(value_error("experiment.methods", "at least one method is required"));
        }
        if self.methods.iter().collect::<BTreeSet<_>>().len() != self.methods.len() {
            return Err(value_error("experiment.methods", "methods must not repeat"));
        }
        if self.trials == 0 {
            return Err(value_error("experiment.trials", "must be positive"));
        }
        self.scenario.validate().map_err(at("scenario"))?;
        self.model_spec(0).validate().map_err(at("model"))?;
        self.training.validate().map_err(at("training"))?;
        self.forsaken.validate().map_err(at("forsaken"))?;
        self.sisa.validate().map_err(at("sisa"))?;
        Ok(())
    }
}

fn value_error(key: &str, message: impl Into<String>) -> Error {
    Error::ConfigValue {
        key: key.to_string(),
        message: message.into(),
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse().map_err(|e: T::Err| format!("`{v}`: {e}"))
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{v}` is not true or false")),
    }
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(s.trim())).collect()
}

fn named<T>(v: &str, parse: impl Fn(&str) -> Option<T>) -> std::result::Result<T, String> {
    parse(v).ok_or_else(|| format!("unknown value `{v}`"))
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn set(cfg: &mut ExperimentConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    let s = &mut cfg.scenario;
    let t = &mut cfg.training;
    let f = &mut cfg.forsaken;
    match key {
        "experiment.methods" => {
            cfg.methods = v
                .split(',')
                .map(|m| named(m.trim(), Method::parse))
                .collect::<std::result::Result<_, _>>()?
        }
        "experiment.trials" => cfg.trials = num(v)?,
        "experiment.seed" => cfg.seed = num(v)?,
        "experiment.out" => cfg.out = PathBuf::from(v),
        "scenario.kind" => s.kind = named(v, ScenarioKind::parse)?,
        "scenario.n_train" => s.n_train = num(v)?,
        "scenario.n_test" => s.n_test = num(v)?,
        "scenario.n_unlearn" => s.n_unlearn = num(v)?,
        "scenario.n_reference" => s.n_reference = num(v)?,
        "scenario.n_classes" => s.n_classes = num(v)?,
        "scenario.input_dim" => s.input_dim = num(v)?,
        "scenario.spread" => s.spread = num(v)?,
        "scenario.ood_clusters" => s.ood_clusters = num(v)?,
        "scenario.shift" => s.shift = num(v)?,
        "scenario.poison_fraction" => s.poison_fraction = num(v)?,
        "scenario.poison_pair" => match list::<usize>(v)?.as_slice() {
            [a, b] => s.poison_pair = (*a, *b),
            _ => return Err(format!("`{v}` is not a pair like 4,2")),
        },
        "model.hidden" => cfg.hidden = list(v)?,
        "model.activation" => cfg.activation = named(v, Activation::parse)?,
        "training.epochs" => t.epochs = num(v)?,
        "training.batch_size" => t.batch_size = num(v)?,
        "training.learning_rate" => t.learning_rate = num(v)?,
        "training.optimizer" => t.optimizer = named(v, OptimizerKind::parse)?,
        "forsaken.iterations" => f.iterations = num(v)?,
        "forsaken.xi" => f.xi = num(v)?,
        "forsaken.lambda" => f.lambda = num(v)?,
        "forsaken.use_penalty_weight" => f.use_penalty_weight = flag(v)?,
        "forsaken.scalar_penalty_weight" => f.scalar_penalty_weight = flag(v)?,
        "forsaken.optimizer" => f.optimizer = named(v, OptimizerKind::parse)?,
        "forsaken.learning_rate" => f.learning_rate = if v == "auto" { None } else { Some(num(v)?) },
        "forsaken.d0_fraction" => f.d0_fraction = num(v)?,
        "forsaken.early_stop_kl" => f.early_stop_kl = num(v)?,
        "forsaken.kl_direction" => f.kl_direction = named(v, KlDirection::parse)?,
        "forsaken.trace_test_accuracy" => f.trace_test_accuracy = flag(v)?,
        "smu.repair_epochs" => cfg.smu_repair_epochs = num(v)?,
        "sisa.shards" => cfg.sisa.shards = num(v)?,
        "sisa.slices" => cfg.sisa.slices = num(v)?,
        _ => return Err("unknown key".into()),
    }
    Ok(())
}

fn entries(cfg: &ExperimentConfig) -> Vec<(&'static str, String)> {
    let s = &cfg.scenario;
    let t = &cfg.training;
    let f = &cfg.forsaken;
    let methods: Vec<&str> = cfg.methods.iter().map(|m| m.name()).collect();
    vec![
        ("experiment.methods", methods.join(",")),
        ("experiment.trials", cfg.trials.to_string()),
        ("experiment.seed", cfg.seed.to_string()),
        ("experiment.out", cfg.out.display().to_string()),
        ("scenario.kind", s.kind.name().into()),
        ("scenario.n_train", s.n_train.to_string()),
        ("scenario.n_test", s.n_test.to_string()),
        ("scenario.n_unlearn", s.n_unlearn.to_string()),
        ("scenario.n_reference", s.n_reference.to_string()),
        ("scenario.n_classes", s.n_classes.to_string()),
        ("scenario.input_dim", s.input_dim.to_string()),
        ("scenario.spread", s.spread.to_string()),
        ("scenario.ood_clusters", s.ood_clusters.to_string()),
        ("scenario.shift", s.shift.to_string()),
        ("scenario.poison_fraction", s.poison_fraction.to_string()),
        ("scenario.poison_pair", format!("{},{}", s.poison_pair.0, s.poison_pair.1)),
        ("model.hidden", join(&cfg.hidden)),
        ("model.activation", cfg.activation.name().into()),
        ("training.epochs", t.epochs.to_string()),
        ("training.batch_size", t.batch_size.to_string()),
        ("training.learning_rate", t.learning_rate.to_string()),
        ("training.optimizer", t.optimizer.name().into()),
        ("forsaken.iterations", f.iterations.to_string()),
        ("forsaken.xi", f.xi.to_string()),
        ("forsaken.lambda", f.lambda.to_string()),
        ("forsaken.use_penalty_weight", f.use_penalty_weight.to_string()),
        ("forsaken.scalar_penalty_weight", f.scalar_penalty_weight.to_string()),
        ("forsaken.optimizer", f.optimizer.name().into()),
        (
            "forsaken.learning_rate",
            f.learning_rate.map_or_else(|| "auto".to_string(), |v| v.to_string()),
        ),
        ("forsaken.d0_fraction", f.d0_fraction.to_string()),
        ("forsaken.early_stop_kl", f.early_stop_kl.to_string()),
        ("forsaken.kl_direction", f.kl_direction.name().into()),
        ("forsaken.trace_test_accuracy", f.trace_test_accuracy.to_string()),
        ("smu.repair_epochs", cfg.smu_repair_epochs.to_string()),
        ("sisa.shards", cfg.sisa.shards.to_string()),
        ("sisa.slices", cfg.sisa.slices.to_string()),
    ]
}

/// Parses and validates a config; missing keys keep their defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut seen = BTreeSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::ConfigSyntax {
            line: line_no,
            message: format!("expected `section.key = value`, found `{line}`"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !key.contains('.') {
            return Err(Error::ConfigSyntax {
                line: line_no,
                message: format!("key `{key}` has no section"),
            });
        }
        if !seen.insert(key.to_string()) {
            return Err(Error::ConfigSyntax {
                line: line_no,
                message: format!("`{key}` is set twice"),
            });
        }
        set(&mut cfg, key, value).map_err(|m| value_error(key, format!("line {line_no}: {m}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Every key, in a fixed order.
pub fn serialize_config(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    for (k, v) in entries(cfg) {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    }
    out
}
