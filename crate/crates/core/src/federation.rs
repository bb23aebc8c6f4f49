//! Multi-user training rounds.
//!
//! Every round the users train in parallel on immutable snapshots of the
//! previous state, then their weights are averaged in fixed user order.
//! The fusion and decentralized architectures compute the same average and
//! differ only in the messages they log.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{CostModel, LabeledDataset, Vector, WeightVector};
use crate::solvers::{
    descend, initial_weights, proximal_response, DataObjective, RobustObjective, SolverConfig,
};
use crate::uncertainty::{ProtectionForm, ProtectionSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    #[default]
    Fusion,
    Decentralized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Local GD steps on the plain local cost.
    FedAvg,
    /// Local GD steps on the protected cost anchored at the broadcast weights.
    #[default]
    RobustFed,
    /// One proximal response per round, centred at the user's own last iterate.
    ProxiFed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FederationConfig {
    pub num_users: usize,
    pub architecture: Architecture,
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub local: SolverConfig,
    pub local_epochs: usize,
    pub protection: Vec<ProtectionSpec>,
    pub form: ProtectionForm,
    /// Stop once `‖wᵗ − wᵗ⁻¹‖₂ ≤ tolerance` on the aggregate.
    pub tolerance: f64,
}

impl FederationConfig {
    /// Fusion FedAvg with 5 local epochs and no protection.
    pub fn fedavg(num_users: usize, rounds: usize, local: SolverConfig) -> Self {
        Self {
            num_users,
            architecture: Architecture::Fusion,
            algorithm: Algorithm::FedAvg,
            rounds,
            local,
            local_epochs: 5,
            protection: vec![ProtectionSpec::none(); num_users],
            form: ProtectionForm::Server,
            tolerance: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 {
            return Err(Error::Argument("federation needs at least one user".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Argument("federation needs at least one round".into()));
        }
        if self.local_epochs == 0 {
            return Err(Error::Argument("local_epochs must be at least 1".into()));
        }
        if self.protection.len() != self.num_users {
            return Err(Error::Argument(format!(
                "{} protection specs for {} users",
                self.protection.len(),
                self.num_users
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Argument("federation tolerance must be positive".into()));
        }
        self.local.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Endpoint {
    Server,
    User(usize),
}

/// One simulated weight transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub round: usize,
    pub sender: Endpoint,
    pub receiver: Endpoint,
    pub payload_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub aggregate: WeightVector,
    /// Mean of the users' plain local costs at the aggregate.
    pub global_cost: f64,
    /// Each user's plain local cost at its own iterate.
    pub local_costs: Vec<f64>,
    pub step_norm: f64,
}

impl RoundRecord {
    pub fn mean_local_cost(&self) -> f64 {
        self.local_costs.iter().sum::<f64>() / self.local_costs.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FederationState {
    pub round: usize,
    pub user_weights: Vec<WeightVector>,
    pub aggregate: WeightVector,
    /// Entry 0 describes the initial point.
    pub history: Vec<RoundRecord>,
    pub messages: Vec<Message>,
    pub converged: bool,
}

impl FederationState {
    /// Every user starts from the same broadcast `w⁰`.
    pub fn initial(
        model: &CostModel,
        partition: &[LabeledDataset],
        start: WeightVector,
    ) -> Result<Self> {
        if partition.is_empty() {
            return Err(Error::Argument("federation over an empty partition".into()));
        }
        if start.len() != model.param_dim() {
            return Err(Error::Shape("initial weights have the wrong dimension".into()));
        }
        let mut local_costs = Vec::with_capacity(partition.len());
        for data in partition {
            local_costs.push(model.local_cost(&start, data)?);
        }
        let record = RoundRecord {
            round: 0,
            aggregate: start.clone(),
            global_cost: model.global_cost(&start, partition)?,
            local_costs,
            step_norm: 0.0,
        };
        Ok(Self {
            round: 0,
            user_weights: vec![start.clone(); partition.len()],
            aggregate: start,
            history: vec![record],
            messages: Vec::new(),
            converged: false,
        })
    }

    pub fn last_record(&self) -> &RoundRecord {
        self.history.last().expect("history holds the initial record")
    }
}

/// Componentwise mean, summed in user-index order.
pub fn aggregate_weights(user_weights: &[WeightVector]) -> Result<WeightVector> {
    let first = user_weights
        .first()
        .ok_or_else(|| Error::Argument("cannot aggregate an empty weight list".into()))?;
    let dim = first.len();
    let mut sum = Vector::zeros(dim);
    for w in user_weights {
        if w.len() != dim {
            return Err(Error::Argument(format!(
                "ragged weights: {} vs {} entries",
                w.len(),
                dim
            )));
        }
        sum += w.as_vector();
    }
    Ok((sum / user_weights.len() as f64).into())
}

fn other_users(weights: &[WeightVector], user: usize) -> Vector {
    let dim = weights[0].len();
    let mut stacked = Vec::with_capacity(dim * (weights.len() - 1));
    for (m, w) in weights.iter().enumerate() {
        if m != user {
            stacked.extend_from_slice(w.as_slice());
        }
    }
    Vector::from_vec(stacked)
}

fn local_update(
    user: usize,
    state: &FederationState,
    config: &FederationConfig,
    model: &CostModel,
    data: &LabeledDataset,
) -> Result<WeightVector> {
    let spec = &config.protection[user];
    let local = SolverConfig { max_iters: config.local_epochs, ..config.local };
    let anchor = match config.form {
        ProtectionForm::Server => state.aggregate.as_vector().clone(),
        ProtectionForm::Direct => other_users(&state.user_weights, user),
    };
    match config.algorithm {
        Algorithm::FedAvg => {
            let trace = descend(&DataObjective { model, data }, state.aggregate.clone(), &local)?;
            Ok(trace.last().clone())
        }
        Algorithm::RobustFed => {
            let objective = RobustObjective { model, data, spec, anchor: &anchor, form: config.form };
            let trace = descend(&objective, state.aggregate.clone(), &local)?;
            Ok(trace.last().clone())
        }
        Algorithm::ProxiFed => proximal_response(
            model,
            &state.user_weights[user],
            &anchor,
            data,
            spec,
            config.form,
            &config.local,
        ),
    }
}

/// Local training for every user followed by aggregation.
pub fn run_round(
    state: FederationState,
    config: &FederationConfig,
    model: &CostModel,
    partition: &[LabeledDataset],
) -> Result<FederationState> {
    config.validate()?;
    if partition.len() != config.num_users {
        return Err(Error::Argument(format!(
            "partition has {} users, config expects {}",
            partition.len(),
            config.num_users
        )));
    }
    let round = state.round + 1;
    let results: Vec<Result<WeightVector>> = partition
        .par_iter()
        .enumerate()
        .map(|(n, data)| local_update(n, &state, config, model, data))
        .collect();
    let mut user_weights = Vec::with_capacity(results.len());
    for (user, result) in results.into_iter().enumerate() {
        user_weights.push(result.map_err(|e| Error::User { user, round, source: Box::new(e) })?);
    }

    let n = user_weights.len();
    let dim = model.param_dim();
    let mut messages = state.messages;
    let aggregate = match config.architecture {
        Architecture::Fusion => {
            for u in 0..n {
                messages.push(Message {
                    round,
                    sender: Endpoint::User(u),
                    receiver: Endpoint::Server,
                    payload_dim: dim,
                });
            }
            for u in 0..n {
                messages.push(Message {
                    round,
                    sender: Endpoint::Server,
                    receiver: Endpoint::User(u),
                    payload_dim: dim,
                });
            }
            aggregate_weights(&user_weights)?
        }
        Architecture::Decentralized => {
            // every user receives every weight vector and averages on its own
            let mut local_views = Vec::with_capacity(n);
            for receiver in 0..n {
                for sender in 0..n {
                    messages.push(Message {
                        round,
                        sender: Endpoint::User(sender),
                        receiver: Endpoint::User(receiver),
                        payload_dim: dim,
                    });
                }
                local_views.push(aggregate_weights(&user_weights)?);
            }
            local_views.swap_remove(0)
        }
    };

    let mut local_costs = Vec::with_capacity(n);
    for (w, data) in user_weights.iter().zip(partition) {
        local_costs.push(model.local_cost(w, data)?);
    }
    let step_norm = (aggregate.as_vector() - state.aggregate.as_vector()).norm();
    let mut history = state.history;
    history.push(RoundRecord {
        round,
        aggregate: aggregate.clone(),
        global_cost: model.global_cost(&aggregate, partition)?,
        local_costs,
        step_norm,
    });
    Ok(FederationState {
        round,
        user_weights,
        aggregate,
        history,
        messages,
        converged: step_norm <= config.tolerance,
    })
}

/// Rounds until the aggregate moves by at most the tolerance, or `rounds`.
pub fn run_federation(
    config: &FederationConfig,
    model: &CostModel,
    partition: &[LabeledDataset],
) -> Result<FederationState> {
    let start = initial_weights(model.param_dim(), config.local.seed);
    run_federation_from(config, model, partition, start)
}

pub fn run_federation_from(
    config: &FederationConfig,
    model: &CostModel,
    partition: &[LabeledDataset],
    start: WeightVector,
) -> Result<FederationState> {
    config.validate()?;
    let mut state = FederationState::initial(model, partition, start)?;
    while state.round < config.rounds {
        state = run_round(state, config, model, partition)?;
        if state.converged {
            break;
        }
    }
    Ok(state)
}
