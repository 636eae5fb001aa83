//! Federated training loop: each round the server broadcasts the global LoRA
//! factors, every participating client trains its personalized modules and
//! then its LoRA copy on the preference loss, and the server averages the
//! uploaded `A` and `B` factors weighted by training-set size.
//!
//! Only LoRA factors and a handful of scalars cross the client boundary. The
//! bottleneck adapter, both heads, the reference policy and the data stay on
//! the client.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EncodedTriple;
use crate::error::{Error, Result};
use crate::harness::preference_accuracy;
use crate::model::checkpoint::{write_json, PersonalizedModules};
use crate::model::{
    Backbone, ClientModel, LoraSet, ModelConfig, ModelGrads, ParamGroup, ReferenceSnapshot, Trainable,
};
use crate::numerics::SeededRng;
use crate::objectives::{
    pdpo_loss_and_grads, pdpo_loss_fixed_scale, reward_weight_at, score_reference, AdaptiveScaler,
    LrDecayTracker, ObjectiveConfig, OptimizerConfig, OptimizerState, ScoredTriple,
};

const STREAM_SERVER_LORA: u64 = 0x5e_0001;
const STREAM_PARTICIPATION: u64 = 0x5e_1000;
const STREAM_CLIENT: u64 = 0xc1_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub n_clients: usize,
    pub total_rounds: usize,
    /// Learning rate of the personalized phase.
    pub eta_h: f64,
    /// Learning rate of the LoRA phase.
    pub eta_w: f64,
    pub local_epochs_personalized: usize,
    pub local_epochs_lora: usize,
    pub participation_ratio: f64,
    pub deterministic_mode: bool,
    pub seed: u64,
    pub batch_size: usize,
    /// Micro-batches averaged into one optimizer step.
    pub grad_accumulation: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            n_clients: 3,
            total_rounds: 10,
            eta_h: 1e-2,
            eta_w: 5e-3,
            local_epochs_personalized: 1,
            local_epochs_lora: 1,
            participation_ratio: 1.0,
            deterministic_mode: true,
            seed: 0,
            batch_size: 8,
            grad_accumulation: 2,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::Config("n_clients must be >= 1".into()));
        }
        if self.total_rounds == 0 {
            return Err(Error::Config("total_rounds must be >= 1".into()));
        }
        for (name, lr) in [("eta_h", self.eta_h), ("eta_w", self.eta_w)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::Config(format!("{name} = {lr} must be finite and >= 0")));
            }
        }
        if !(self.participation_ratio > 0.0 && self.participation_ratio <= 1.0) {
            return Err(Error::Config("participation_ratio must lie in (0, 1]".into()));
        }
        if self.batch_size == 0 || self.grad_accumulation == 0 {
            return Err(Error::Config("batch_size and grad_accumulation must be >= 1".into()));
        }
        self.optimizer.validate()
    }
}

/// `p_i = |D_i| / Σ_j |D_j|` over the clients taking part in a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    pub p: Vec<f64>,
}

impl AggregationWeights {
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let total: usize = sizes.iter().sum();
        if total == 0 {
            return Err(Error::Contract("aggregation over clients with no training data".into()));
        }
        Ok(Self {
            p: sizes.iter().map(|&n| n as f64 / total as f64).collect(),
        })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::from_sizes(&vec![1; n])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub lora: LoraSet,
    /// Number of completed rounds.
    pub round: usize,
}

/// Scalars a client reports after its local round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub loss_personalized: f64,
    pub loss_lora: f64,
    pub s: f64,
    pub lr_personalized: f64,
    pub lr_lora: f64,
}

/// The complete client-to-server payload of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpload {
    pub client_id: usize,
    pub round: usize,
    pub n_train: usize,
    pub lora: LoraSet,
    pub stats: RoundStats,
}

/// One metrics line: a client's state at the end of a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub client_id: usize,
    pub participated: bool,
    pub loss_personalized: Option<f64>,
    pub loss_lora: Option<f64>,
    pub train_loss: f64,
    /// `None` when the client has no test split.
    pub test_accuracy: Option<f64>,
    pub s: f64,
    pub w_r: f64,
    pub lr_personalized: f64,
    pub lr_lora: f64,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub model: ClientModel,
    pub reference: ReferenceSnapshot,
    pub train: Vec<ScoredTriple>,
    pub test: Vec<EncodedTriple>,
    pub scaler: AdaptiveScaler,
    pub opt_personalized: OptimizerState,
    pub opt_lora: OptimizerState,
    decay_personalized: LrDecayTracker,
    decay_lora: LrDecayTracker,
    pub rng: SeededRng,
}

impl ClientState {
    /// The reference policy is the client model at creation time, scored
    /// once over the training split.
    pub fn new(
        id: usize,
        model: ClientModel,
        train: &[EncodedTriple],
        test: Vec<EncodedTriple>,
        fed: &FederationConfig,
        objective: &ObjectiveConfig,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Config(format!("client {id} has an empty training split")));
        }
        let reference = model.snapshot();
        let train = score_reference(&reference, train)?;
        Ok(Self {
            id,
            model,
            reference,
            train,
            test,
            scaler: AdaptiveScaler::from_config(objective),
            opt_personalized: OptimizerState::new(fed.eta_h, fed.optimizer)?,
            opt_lora: OptimizerState::new(fed.eta_w, fed.optimizer)?,
            decay_personalized: LrDecayTracker::default(),
            decay_lora: LrDecayTracker::default(),
            rng: SeededRng::new(fed.seed, STREAM_CLIENT + id as u64),
        })
    }

    /// Current scale, or 0 before the explicit term has ever been active.
    pub fn scale(&self) -> f64 {
        self.scaler.scale().unwrap_or(0.0)
    }

    /// Eval-mode loss over the training split at the current scale.
    pub fn train_loss(&self, objective: &ObjectiveConfig, w_r: f64) -> Result<f64> {
        Ok(pdpo_loss_fixed_scale(&self.model, &self.train, objective, w_r, self.scale(), None)?.loss)
    }
}

/// Personalized groups actually in use: the reward head is left alone when
/// the explicit term is switched off.
pub fn personalized_selection(objective: &ObjectiveConfig) -> Trainable {
    if objective.reward_head_enabled {
        Trainable::PERSONALIZED
    } else {
        Trainable::PERSONALIZED.without(ParamGroup::RewardHead)
    }
}

fn train_phase(
    client: &mut ClientState,
    sel: Trainable,
    lora_phase: bool,
    epochs: usize,
    w_r: f64,
    fed: &FederationConfig,
    objective: &ObjectiveConfig,
) -> Result<f64> {
    let mut last_epoch_loss = f64::NAN;
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..client.train.len()).collect();
        client.rng.shuffle(&mut order);
        let batches: Vec<Vec<ScoredTriple>> = order
            .chunks(fed.batch_size)
            .map(|idx| idx.iter().map(|&i| client.train[i].clone()).collect())
            .collect();
        let mut losses = Vec::with_capacity(batches.len());
        for group in batches.chunks(fed.grad_accumulation) {
            let mut acc: Option<ModelGrads> = None;
            for batch in group {
                let out = pdpo_loss_and_grads(
                    &client.model,
                    batch,
                    objective,
                    &mut client.scaler,
                    w_r,
                    sel,
                    &mut client.rng,
                )?;
                losses.push(out.loss);
                match acc.as_mut() {
                    Some(a) => a.add_assign(&out.grads)?,
                    None => acc = Some(out.grads),
                }
            }
            let mut grads = acc.expect("non-empty accumulation group");
            if group.len() > 1 {
                grads.scale(1.0 / group.len() as f64);
            }
            let opt = if lora_phase {
                &mut client.opt_lora
            } else {
                &mut client.opt_personalized
            };
            opt.step(client.model.trainable_tensors_mut(sel), grads.tensors())?;
        }
        last_epoch_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        if lora_phase {
            client.decay_lora.observe(&mut client.opt_lora, last_epoch_loss);
        } else {
            client
                .decay_personalized
                .observe(&mut client.opt_personalized, last_epoch_loss);
        }
    }
    Ok(last_epoch_loss)
}

/// Phase 1 trains the personalized modules with LoRA frozen, phase 2 trains
/// LoRA with the personalized modules frozen. Returns the upload.
pub fn local_round(
    client: &mut ClientState,
    round: usize,
    w_r: f64,
    fed: &FederationConfig,
    objective: &ObjectiveConfig,
) -> Result<ClientUpload> {
    let personal = personalized_selection(objective);
    let loss_personalized = train_phase(
        client,
        personal,
        false,
        fed.local_epochs_personalized,
        w_r,
        fed,
        objective,
    )
    .map_err(|e| round_error(client.id, round, "personalized", e))?;
    let loss_lora = train_phase(client, Trainable::LORA, true, fed.local_epochs_lora, w_r, fed, objective)
        .map_err(|e| round_error(client.id, round, "lora", e))?;
    Ok(ClientUpload {
        client_id: client.id,
        round,
        n_train: client.train.len(),
        lora: client.model.lora.clone(),
        stats: RoundStats {
            loss_personalized,
            loss_lora,
            s: client.scale(),
            lr_personalized: client.opt_personalized.lr,
            lr_lora: client.opt_lora.lr,
        },
    })
}

fn round_error(client: usize, round: usize, phase: &str, e: Error) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("client {client}, round {round}, {phase} phase: {msg}")),
        Error::Batch(msg) => Error::Batch(format!("client {client}, round {round}, {phase} phase: {msg}")),
        other => other,
    }
}

/// Copies the server LoRA into every client in `clients`.
pub fn broadcast(server: &ServerState, clients: &mut [ClientState]) -> Result<()> {
    for c in clients.iter() {
        if !c.model.lora.same_layout(&server.lora) {
            return Err(Error::Protocol(format!(
                "client {} LoRA layout differs from the server's",
                c.id
            )));
        }
    }
    for c in clients.iter_mut() {
        c.model.lora.clone_from(&server.lora);
    }
    Ok(())
}

/// `X = Σ_i p_i X_i` for every LoRA factor, summed from zero in ascending
/// client order.
pub fn aggregate(server: &mut ServerState, uploads: &[&LoraSet], weights: &AggregationWeights) -> Result<()> {
    if uploads.is_empty() || uploads.len() != weights.p.len() {
        return Err(Error::Contract(format!(
            "{} uploads for {} weights",
            uploads.len(),
            weights.p.len()
        )));
    }
    let sum: f64 = weights.p.iter().sum();
    if (sum - 1.0).abs() > 1e-12 || weights.p.iter().any(|&p| p.is_nan() || p < 0.0) {
        return Err(Error::Contract(format!("aggregation weights sum to {sum}")));
    }
    if let Some(i) = uploads.iter().position(|u| !u.same_layout(&server.lora)) {
        return Err(Error::Protocol(format!("upload {i} has a foreign LoRA layout")));
    }
    let mut acc = server.lora.zeros_like();
    for (upload, &p) in uploads.iter().zip(&weights.p) {
        for (a, u) in acc.tensors_mut().into_iter().zip(upload.tensors()) {
            a.add_scaled(u, p)?;
        }
    }
    server.lora = acc;
    Ok(())
}

/// Clients taking part in a round, ascending.
pub fn sample_participants(fed: &FederationConfig, round: usize) -> Vec<usize> {
    if fed.participation_ratio >= 1.0 {
        return (0..fed.n_clients).collect();
    }
    let m = ((fed.participation_ratio * fed.n_clients as f64).round() as usize).clamp(1, fed.n_clients);
    let mut ids: Vec<usize> = (0..fed.n_clients).collect();
    SeededRng::new(fed.seed, STREAM_PARTICIPATION + round as u64).shuffle(&mut ids);
    ids.truncate(m);
    ids.sort_unstable();
    ids
}

/// Per-client data handed to [`FederationState::new`].
#[derive(Debug, Clone)]
pub struct ClientData {
    pub train: Vec<EncodedTriple>,
    pub test: Vec<EncodedTriple>,
}

#[derive(Debug, Clone)]
pub struct FederationState {
    pub config: FederationConfig,
    pub objective: ObjectiveConfig,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    /// Every record emitted so far; kept when a round fails.
    pub history: Vec<RoundRecord>,
}

pub fn client_model_seed(fed_seed: u64, client_id: usize) -> u64 {
    SeededRng::new(fed_seed, STREAM_CLIENT + client_id as u64).fork(1).next_u64()
}

impl FederationState {
    /// One shared frozen backbone, a seeded global LoRA, and one client per
    /// entry of `data`, each starting from the global LoRA.
    pub fn new(
        config: FederationConfig,
        model: &ModelConfig,
        objective: ObjectiveConfig,
        data: Vec<ClientData>,
    ) -> Result<Self> {
        config.validate()?;
        objective.validate()?;
        model.validate()?;
        if data.len() != config.n_clients {
            return Err(Error::Config(format!(
                "{} client datasets for n_clients = {}",
                data.len(),
                config.n_clients
            )));
        }
        let backbone = Arc::new(Backbone::init(&model.backbone)?);
        let mut rng = SeededRng::new(config.seed, STREAM_SERVER_LORA);
        let server = ServerState {
            lora: LoraSet::init(
                &model.lora,
                model.backbone.hidden_dim,
                model.backbone.n_layers,
                &mut rng,
            )?,
            round: 0,
        };
        let clients = data
            .into_iter()
            .enumerate()
            .map(|(id, d)| {
                let mut m = ClientModel::with_backbone(
                    Arc::clone(&backbone),
                    model,
                    client_model_seed(config.seed, id),
                )?;
                m.lora.clone_from(&server.lora);
                ClientState::new(id, m, &d.train, d.test, &config, &objective)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            objective,
            server,
            clients,
            history: Vec::new(),
        })
    }

    /// Runs one round: broadcast, local training, aggregation, re-broadcast,
    /// evaluation. Returns the round's records (also appended to `history`).
    pub fn step_round(&mut self) -> Result<Vec<RoundRecord>> {
        let t = self.server.round;
        let total = self.config.total_rounds;
        let w_r = reward_weight_at(&self.objective, t, total)?;
        let round = t + 1;
        let participants = sample_participants(&self.config, t);

        broadcast(&self.server, &mut self.clients)?;
        let (fed, objective) = (&self.config, &self.objective);
        let mut active: Vec<&mut ClientState> = self
            .clients
            .iter_mut()
            .filter(|c| participants.contains(&c.id))
            .collect();
        let uploads: Vec<ClientUpload> = if fed.deterministic_mode {
            active
                .iter_mut()
                .map(|c| local_round(c, round, w_r, fed, objective))
                .collect::<Result<_>>()?
        } else {
            active
                .par_iter_mut()
                .map(|c| local_round(c, round, w_r, fed, objective))
                .collect::<Result<_>>()?
        };

        let sizes: Vec<usize> = uploads.iter().map(|u| u.n_train).collect();
        let weights = AggregationWeights::from_sizes(&sizes)?;
        let loras: Vec<&LoraSet> = uploads.iter().map(|u| &u.lora).collect();
        aggregate(&mut self.server, &loras, &weights)?;
        self.server.round = round;
        broadcast(&self.server, &mut self.clients)?;

        let mut records = Vec::with_capacity(self.clients.len());
        for c in &self.clients {
            let upload = uploads.iter().find(|u| u.client_id == c.id);
            let test_accuracy = if c.test.is_empty() {
                None
            } else {
                Some(preference_accuracy(&c.model, &c.test)?)
            };
            records.push(RoundRecord {
                round,
                client_id: c.id,
                participated: upload.is_some(),
                loss_personalized: upload.map(|u| u.stats.loss_personalized),
                loss_lora: upload.map(|u| u.stats.loss_lora),
                train_loss: c.train_loss(&self.objective, w_r)?,
                test_accuracy,
                s: c.scale(),
                w_r,
                lr_personalized: c.opt_personalized.lr,
                lr_lora: c.opt_lora.lr,
            });
        }
        self.history.extend(records.iter().cloned());
        Ok(records)
    }

    /// Writes `round_XXX/server_lora.json` and one `client_i.json` of
    /// personalized modules per client under `dir`.
    pub fn save_round_checkpoint(&self, dir: &Path) -> Result<()> {
        let round_dir = dir.join(format!("round_{:03}", self.server.round));
        write_json(&round_dir.join("server_lora.json"), &self.server)?;
        for c in &self.clients {
            write_json(
                &round_dir.join(format!("client_{}.json", c.id)),
                &PersonalizedModules::of(&c.model),
            )?;
        }
        Ok(())
    }
}

/// Runs the remaining rounds, calling `on_round` after each. On error the
/// state keeps the history of the rounds that completed.
pub fn run_federation(
    state: &mut FederationState,
    mut on_round: impl FnMut(&FederationState, &[RoundRecord]) -> Result<()>,
) -> Result<()> {
    while state.server.round < state.config.total_rounds {
        let records = state.step_round()?;
        on_round(state, &records)?;
    }
    Ok(())
}
