//! Synchronous federated rounds in which a client may upload a scaled mask
//! gradient in place of an ordinary gradient.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codec::{put_len, put_u32, Reader};
use crate::data::{Role, ScenarioDataset};
use crate::error::{Error, Result};
use crate::forsaken::{client_mask_scale, run_forsaken, ForsakenConfig};
use crate::membership::MembershipOracle;
use crate::metrics::{catastrophic_forgetting_rate, forgetting_rate};
use crate::nn::{cross_entropy_sum, evaluate, ModelSpec, ParamVector};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientMode {
    Learn,
    Unlearn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub id: u32,
    /// Local dataset rows, ascending.
    pub indices: Vec<usize>,
    /// Local rows this client wants forgotten.
    pub unlearn: Vec<usize>,
}

impl ClientState {
    pub fn n0(&self) -> usize {
        self.indices.len()
    }
}

/// What travels from client to server. The schema is the same in both
/// modes, so the server cannot tell which clients are unlearning.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundMessage {
    pub client_id: u32,
    pub n0: u32,
    pub payload: Vec<f64>,
}

impl RoundMessage {
    /// `client_id u32, n0 u32, payload_len u32, f64[]`, little-endian.
    pub fn encode(&self, out: &mut Vec<u8>) -> Result<()> {
        put_u32(out, self.client_id);
        put_u32(out, self.n0);
        put_len(out, self.payload.len())?;
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let client_id = r.u32()?;
        let n0 = r.u32()?;
        let len = r.u32()? as usize;
        let payload = r.f64s(len)?;
        Ok(RoundMessage { client_id, n0, payload })
    }
}

pub fn encode_log(messages: &[RoundMessage]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for m in messages {
        m.encode(&mut out)?;
    }
    Ok(out)
}

pub fn decode_log(bytes: &[u8]) -> Result<Vec<RoundMessage>> {
    let mut r = Reader::new(bytes);
    let mut out = Vec::new();
    while !r.is_empty() {
        out.push(RoundMessage::decode(&mut r)?);
    }
    Ok(out)
}

pub fn write_log(path: &Path, messages: &[RoundMessage]) -> Result<()> {
    fs::write(path, encode_log(messages)?).map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<RoundMessage>> {
    decode_log(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// The dataset as the client sees it: only its own unlearn rows keep the
/// unlearn role.
fn client_view(client: &ClientState, dataset: &ScenarioDataset) -> ScenarioDataset {
    let mut view = dataset.clone();
    let own: std::collections::BTreeSet<usize> = client.unlearn.iter().copied().collect();
    for (i, role) in view.roles.iter_mut().enumerate() {
        if *role == Role::Unlearn && !own.contains(&i) {
            *role = Role::Train;
        }
    }
    view
}

/// Learn mode sends the summed cross-entropy gradient over the local data;
/// unlearn mode sends `(n0/η)·μ`, with `μ` the applied Forsaken mask.
pub fn client_round(
    client: &ClientState,
    theta: &ParamVector,
    spec: &ModelSpec,
    dataset: &ScenarioDataset,
    mode: ClientMode,
    eta: f64,
    forsaken: &ForsakenConfig,
) -> Result<RoundMessage> {
    if client.indices.is_empty() {
        return Err(Error::Empty("client local data"));
    }
    let n0 = u32::try_from(client.n0()).map_err(|_| Error::invalid("local data too large"))?;
    let payload = match mode {
        ClientMode::Learn => {
            let (x, y) = dataset.select(&client.indices);
            cross_entropy_sum(theta, spec, &x, &y)?.1
        }
        ClientMode::Unlearn => {
            if client.unlearn.is_empty() {
                return Err(Error::invalid(format!("client {} has nothing to unlearn", client.id)));
            }
            let outcome = run_forsaken(theta, spec, &client_view(client, dataset), forsaken)?;
            client_mask_scale(&outcome.mask.applied(), eta, client.n0())?
        }
    };
    if payload.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("client payload"));
    }
    Ok(RoundMessage {
        client_id: client.id,
        n0,
        payload,
    })
}

/// `θ - η·Σ payload / Σ n0`, summed in client-id order.
pub fn server_aggregate(theta: &ParamVector, messages: &[RoundMessage], eta: f64) -> Result<ParamVector> {
    if messages.is_empty() {
        return Err(Error::Empty("round messages"));
    }
    let mut ordered: Vec<&RoundMessage> = messages.iter().collect();
    ordered.sort_by_key(|m| m.client_id);
    let total: u64 = ordered.iter().map(|m| m.n0 as u64).sum();
    if total == 0 {
        return Err(Error::invalid("messages declare zero samples in total"));
    }
    let mut sum = ordered[0].payload.clone();
    for m in &ordered[1..] {
        if m.payload.len() != sum.len() {
            return Err(Error::DimensionMismatch {
                expected: sum.len(),
                got: m.payload.len(),
            });
        }
        sum.iter_mut().zip(&m.payload).for_each(|(s, v)| *s += v);
    }
    if sum.len() != theta.len() {
        return Err(Error::DimensionMismatch {
            expected: theta.len(),
            got: sum.len(),
        });
    }
    let total = total as f64;
    theta.with_values(theta.values().iter().zip(&sum).map(|(t, s)| t - eta * (s / total)).collect())
}

/// Splits `train ∪ unlearn` over `n_clients` clients by a seeded shuffle.
pub fn partition_clients(dataset: &ScenarioDataset, n_clients: usize, seed: u64) -> Result<Vec<ClientState>> {
    let mut pool = dataset.training_indices();
    if n_clients == 0 || n_clients > pool.len() {
        return Err(Error::invalid(format!("cannot spread {} samples over {n_clients} clients", pool.len())));
    }
    pool.shuffle(&mut rng::seeded(rng::derive_seed(seed, "clients")));
    Ok((0..n_clients)
        .map(|c| {
            let mut indices: Vec<usize> = pool.iter().skip(c).step_by(n_clients).copied().collect();
            indices.sort_unstable();
            let unlearn = indices.iter().copied().filter(|&i| dataset.roles[i] == Role::Unlearn).collect();
            ClientState {
                id: c as u32,
                indices,
                unlearn,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub rounds: usize,
    pub eta: f64,
    /// `(round, client id)` entries that unlearn; everything else learns.
    pub schedule: BTreeMap<(usize, u32), ClientMode>,
    pub forsaken: ForsakenConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub test_acc: f64,
    pub unlearning_clients: Vec<u32>,
    /// Forgetting snapshot over the unlearning clients' samples.
    pub fr: Option<f64>,
    pub cfr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SimOutcome {
    pub params: ParamVector,
    pub rounds: Vec<RoundMetrics>,
    pub messages: Vec<RoundMessage>,
}

/// Runs `config.rounds` rounds with every client participating. After an
/// unlearning round the forgotten rows leave the client's local data, and
/// FR/CFR are measured when an oracle is supplied.
pub fn run_simulation(
    init: &ParamVector,
    spec: &ModelSpec,
    dataset: &ScenarioDataset,
    clients: &[ClientState],
    config: &SimConfig,
    oracle: Option<&MembershipOracle>,
) -> Result<SimOutcome> {
    if let Some(&(_, id)) = config.schedule.keys().find(|(_, id)| !clients.iter().any(|c| c.id == *id)) {
        return Err(Error::invalid(format!("schedule names unknown client {id}")));
    }
    let mut clients = clients.to_vec();
    clients.sort_by_key(|c| c.id);
    let test = dataset.indices(Role::Test);
    let (x_test, y_test) = dataset.select(&test);
    let mut theta = init.clone();
    let mut rounds = Vec::with_capacity(config.rounds);
    let mut log = Vec::new();
    for round in 0..config.rounds {
        let mut messages = Vec::with_capacity(clients.len());
        let mut forgetting = Vec::new();
        for c in &clients {
            let mode = config.schedule.get(&(round, c.id)).copied().unwrap_or(ClientMode::Learn);
            messages.push(client_round(c, &theta, spec, dataset, mode, config.eta, &config.forsaken)?);
            if mode == ClientMode::Unlearn {
                forgetting.push(c.id);
            }
        }
        let next = server_aggregate(&theta, &messages, config.eta)?;
        let mut fr = None;
        let mut cfr = None;
        if !forgetting.is_empty() {
            let forgotten: Vec<usize> = clients
                .iter()
                .filter(|c| forgetting.contains(&c.id))
                .flat_map(|c| c.unlearn.iter().copied())
                .collect();
            if let Some(oracle) = oracle {
                let retained: Vec<usize> = clients
                    .iter()
                    .flat_map(|c| c.indices.iter().copied())
                    .filter(|i| !forgotten.contains(i))
                    .collect();
                let xu = dataset.x.select_rows(&forgotten);
                let xr = dataset.x.select_rows(&retained);
                fr = forgetting_rate(&oracle.verdicts(&theta, spec, &xu)?, &oracle.verdicts(&next, spec, &xu)?).ok();
                cfr = catastrophic_forgetting_rate(&oracle.verdicts(&theta, spec, &xr)?, &oracle.verdicts(&next, spec, &xr)?)
                    .ok();
            }
            for c in clients.iter_mut().filter(|c| forgetting.contains(&c.id)) {
                let gone = std::mem::take(&mut c.unlearn);
                c.indices.retain(|i| !gone.contains(i));
            }
        }
        theta = next;
        let test_acc = if test.is_empty() {
            f64::NAN
        } else {
            evaluate(&theta, spec, &x_test, &y_test)?.0
        };
        rounds.push(RoundMetrics {
            round,
            test_acc,
            unlearning_clients: forgetting,
            fr,
            cfr,
        });
        log.extend(messages);
    }
    Ok(SimOutcome {
        params: theta,
        rounds,
        messages: log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_scenario, ScenarioKind, ScenarioSpec};
    use crate::nn::{build_model, train, OptimizerKind, TrainConfig, TrainData};
    use proptest::prelude::*;

    fn scenario() -> (ScenarioDataset, ModelSpec) {
        let ds = build_scenario(&ScenarioSpec {
            kind: ScenarioKind::OodForeign,
            n_train: 200,
            n_test: 100,
            n_unlearn: 12,
            n_reference: 30,
            n_classes: 3,
            input_dim: 4,
            seed: 6,
            ..ScenarioSpec::default()
        })
        .unwrap();
        (ds, ModelSpec::new(vec![4, 8, 3], 3))
    }

    fn msg(id: u32, n0: u32, payload: Vec<f64>) -> RoundMessage {
        RoundMessage {
            client_id: id,
            n0,
            payload,
        }
    }

    #[test]
    fn single_unlearning_client_recovers_mask() {
        let (_, spec) = scenario();
        let theta = build_model(&spec).unwrap();
        let mu: Vec<f64> = (0..theta.len()).map(|i| (i as f64 * 0.37).sin() * 0.1).collect();
        let (eta, n0) = (0.3, 57);
        let payload = client_mask_scale(&mu, eta, n0).unwrap();
        let next = server_aggregate(&theta, &[msg(0, n0 as u32, payload)], eta).unwrap();
        for ((a, t), m) in next.values().iter().zip(theta.values()).zip(&mu) {
            assert!((a - (t - m)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn mask_identity(eta in 1e-3f64..=1.0, n0 in 1usize..=10_000, mu in prop::collection::vec(-1.0f64..1.0, 43)) {
            let spec = ModelSpec::new(vec![4, 5, 3], 0);
            let theta = build_model(&spec).unwrap();
            let next = server_aggregate(&theta, &[msg(2, n0 as u32, client_mask_scale(&mu, eta, n0).unwrap())], eta).unwrap();
            for ((a, t), m) in next.values().iter().zip(theta.values()).zip(&mu) {
                prop_assert!((a - (t - m)).abs() < 1e-12);
            }
        }

        #[test]
        fn aggregation_is_order_free(payloads in prop::collection::vec((1u32..50, prop::collection::vec(-1.0f64..1.0, 43)), 1..5)) {
            let spec = ModelSpec::new(vec![4, 5, 3], 0);
            let theta = build_model(&spec).unwrap();
            let messages: Vec<RoundMessage> = payloads.iter().enumerate().map(|(i, (n, p))| msg(i as u32, *n, p.clone())).collect();
            let mut reversed = messages.clone();
            reversed.reverse();
            prop_assert_eq!(server_aggregate(&theta, &messages, 0.1).unwrap(), server_aggregate(&theta, &reversed, 0.1).unwrap());
        }
    }

    #[test]
    fn doubled_learn_payload_equals_doubled_count() {
        let theta = build_model(&ModelSpec::new(vec![2, 2], 0)).unwrap();
        let p = vec![0.5, -1.0, 2.0, 0.25, 1.0, -0.5];
        let two = server_aggregate(&theta, &[msg(0, 3, p.clone()), msg(1, 3, p.clone())], 0.2).unwrap();
        let one = server_aggregate(&theta, &[msg(0, 6, p.iter().map(|v| 2.0 * v).collect())], 0.2).unwrap();
        for (a, b) in two.values().iter().zip(one.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(server_aggregate(&theta, &[], 0.2).is_err());
        assert!(server_aggregate(&theta, &[msg(0, 0, p)], 0.2).is_err());
    }

    #[test]
    fn zero_gradient_gives_zero_payload() {
        let (ds, _) = scenario();
        // all-zero weights and biases: uniform softmax, zero hidden activations
        let spec = ModelSpec::new(vec![4, 3], 0);
        let mut theta = build_model(&spec).unwrap();
        theta.values_mut().iter_mut().for_each(|v| *v = 0.0);
        // one sample per class cancels the bias gradient; the weights see x = 0
        let mut ds = ds;
        let rows: Vec<usize> = (0..3).collect();
        for (k, &i) in rows.iter().enumerate() {
            ds.labels[i] = k;
            ds.x.row_mut(i).fill(0.0);
        }
        let client = ClientState {
            id: 0,
            indices: rows,
            unlearn: vec![],
        };
        let m = client_round(&client, &theta, &spec, &ds, ClientMode::Learn, 0.1, &ForsakenConfig::default()).unwrap();
        assert!(m.payload.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn wire_format_has_no_mode_field() {
        let (ds, spec) = scenario();
        let theta = {
            let idx = ds.training_indices();
            let cfg = TrainConfig {
                epochs: 30,
                batch_size: 16,
                ..TrainConfig::default()
            };
            train(&build_model(&spec).unwrap(), &spec, &cfg, TrainData::new(&ds.x, &ds.labels, &idx)).unwrap()
        };
        let clients = partition_clients(&ds, 1, 0).unwrap();
        let cfg = ForsakenConfig {
            iterations: 3,
            ..ForsakenConfig::default()
        };
        let learn = client_round(&clients[0], &theta, &spec, &ds, ClientMode::Learn, 0.1, &cfg).unwrap();
        let unlearn = client_round(&clients[0], &theta, &spec, &ds, ClientMode::Unlearn, 0.1, &cfg).unwrap();
        let (a, b) = (encode_log(&[learn.clone()]).unwrap(), encode_log(&[unlearn.clone()]).unwrap());
        assert_eq!(a.len(), b.len());
        assert_eq!(a[..12], b[..12]);
        assert_eq!(decode_log(&[a, b].concat()).unwrap(), vec![learn, unlearn]);
        assert!(decode_log(&[1, 0, 0]).is_err());

        // payload equals the scaled mask
        let view = client_view(&clients[0], &ds);
        let mu = run_forsaken(&theta, &spec, &view, &cfg).unwrap().mask.applied();
        let n0 = clients[0].n0() as f64;
        let m2 = client_round(&clients[0], &theta, &spec, &ds, ClientMode::Unlearn, 0.1, &cfg).unwrap();
        for (p, m) in m2.payload.iter().zip(&mu) {
            assert!((p - n0 / 0.1 * m).abs() < 1e-12 * (1.0 + p.abs()));
        }
    }

    #[test]
    fn one_client_full_batch_matches_central_training() {
        let (ds, spec) = scenario();
        let init = build_model(&spec).unwrap();
        let clients = partition_clients(&ds, 1, 4).unwrap();
        let rounds = 7;
        let config = SimConfig {
            rounds,
            eta: 0.2,
            schedule: BTreeMap::new(),
            forsaken: ForsakenConfig::default(),
        };
        let sim = run_simulation(&init, &spec, &ds, &clients, &config, None).unwrap();
        let idx = ds.training_indices();
        let central = train(
            &init,
            &spec,
            &TrainConfig {
                epochs: rounds,
                batch_size: idx.len(),
                learning_rate: 0.2,
                optimizer: OptimizerKind::Sgd,
                shuffle_seed: 0,
            },
            TrainData::new(&ds.x, &ds.labels, &idx),
        )
        .unwrap();
        assert_eq!(sim.params, central);
        assert_eq!(sim.rounds.len(), rounds);
        assert_eq!(sim.messages.len(), rounds);
    }

    #[test]
    fn sole_unlearning_round_moves_by_mu_and_is_deterministic() {
        let (ds, spec) = scenario();
        let idx = ds.training_indices();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let theta = train(&build_model(&spec).unwrap(), &spec, &cfg, TrainData::new(&ds.x, &ds.labels, &idx)).unwrap();
        let clients = partition_clients(&ds, 3, 1).unwrap();
        let target = clients.iter().find(|c| !c.unlearn.is_empty()).unwrap().clone();
        let forsaken = ForsakenConfig {
            iterations: 5,
            ..ForsakenConfig::default()
        };
        let config = SimConfig {
            rounds: 1,
            eta: 0.5,
            schedule: BTreeMap::from([((0, target.id), ClientMode::Unlearn)]),
            forsaken: forsaken.clone(),
        };
        let sim = run_simulation(&theta, &spec, &ds, std::slice::from_ref(&target), &config, None).unwrap();
        let mu = run_forsaken(&theta, &spec, &client_view(&target, &ds), &forsaken).unwrap().mask.applied();
        for ((a, t), m) in sim.params.values().iter().zip(theta.values()).zip(&mu) {
            assert!((a - (t - m)).abs() < 1e-12);
        }
        let again = run_simulation(&theta, &spec, &ds, std::slice::from_ref(&target), &config, None).unwrap();
        assert_eq!(again.params, sim.params);
        assert_eq!(again.rounds, sim.rounds);

        let bad = SimConfig {
            schedule: BTreeMap::from([((0, 99), ClientMode::Unlearn)]),
            ..config
        };
        assert!(run_simulation(&theta, &spec, &ds, &clients, &bad, None).is_err());
    }
}
