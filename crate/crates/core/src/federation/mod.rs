//! Simulated federation: client sampling, local training, server-side
//! averaging, and the per-client personalized models.
//!
//! Every round the server samples a fraction of the clients, each sampled
//! client trains from the current global model (a `LocalOnly` client trains
//! from its own last model instead) and keeps the result as its personalized
//! model, and the server replaces the global model with the average of the
//! returned models weighted by local training-set size.

mod checkpoint;

pub use checkpoint::{read_model, write_model, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use ndarray::Axis;
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;

use crate::data::{to_matrix, ClientDataset, IidTestSet};
use crate::error::{Error, Result};
use crate::eval::{evaluate_round, MetricsRecord};
use crate::loss::{client_empirical_loss, softmax_ce, LossConfig};
use crate::nn::{backward, forward, ModelParams, Sgd};
use crate::rng::{self, stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    /// One-vs-all binary heads with the imbalance-aware loss.
    FedAbc(LossConfig),
    /// Softmax cross-entropy with plain averaging.
    FedAvgSoftmax,
    /// Softmax cross-entropy plus `(mu/2)·‖θ − θ_start‖²` on every batch.
    FedProxSoftmax { mu: f64 },
    /// Clients never communicate after receiving the initial model.
    LocalOnly,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FedAbc(_) => "fedabc",
            Strategy::FedAvgSoftmax => "fedavg",
            Strategy::FedProxSoftmax { .. } => "fedprox",
            Strategy::LocalOnly => "local",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Strategy::FedAbc(cfg) => cfg.validate(),
            Strategy::FedProxSoftmax { mu } if !(*mu >= 0.0 && mu.is_finite()) => {
                Err(Error::InvalidArgument(format!("fedprox mu = {mu}")))
            }
            _ => Ok(()),
        }
    }

    fn aggregates(&self) -> bool {
        !matches!(self, Strategy::LocalOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Weights `n_i / Σ n_j` over the participating clients.
    #[default]
    Weighted,
    /// Equal weights over the participating clients.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub participation_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub aggregation: Aggregation,
    pub seed: u64,
    /// Train the sampled clients of a round on the rayon pool.
    pub parallel_clients: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 30,
            local_epochs: 5,
            participation_rate: 0.5,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
            hidden: vec![260, 200],
            aggregation: Aggregation::Weighted,
            seed: 0,
            parallel_clients: true,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "local_epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "participation_rate = {}",
                self.participation_rate
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden layer of width 0".into()));
        }
        Sgd::new(self.optimizer.lr, self.optimizer.momentum, self.optimizer.weight_decay)?;
        Ok(())
    }

    /// `⌈rate · m⌉`, at least one.
    pub fn clients_per_round(&self, num_clients: usize) -> usize {
        ((self.participation_rate * num_clients as f64).ceil() as usize).clamp(1, num_clients.max(1))
    }

    pub fn architecture(&self, input: usize, classes: usize) -> Vec<usize> {
        std::iter::once(input)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(classes))
            .collect()
    }
}

/// Result of one client's local training.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub params: ModelParams,
    /// Mean batch loss of every local epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a copy of `init` on the client's training split.
///
/// Batches are reshuffled every epoch from a stream keyed by
/// `(seed, client, round)`.
pub fn local_train(
    init: &ModelParams,
    client: &ClientDataset,
    strategy: &Strategy,
    cfg: &FederationConfig,
    round: usize,
) -> Result<LocalOutcome> {
    if client.train.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "client {} has no training samples",
            client.client_id
        )));
    }
    let (x, labels) = to_matrix(&client.train)?;
    if x.ncols() != init.input_width() || client.num_classes() != init.output_width() {
        return Err(Error::Shape(format!(
            "client {} data is {}-dimensional with {} classes, model is {:?}",
            client.client_id,
            x.ncols(),
            client.num_classes(),
            init.architecture()
        )));
    }
    let diverged = || Error::Diverged {
        round,
        client: client.client_id,
    };
    let mut rng = rng::derived(cfg.seed, &[stream::SHUFFLE, client.client_id as u64, round as u64]);
    let opt = cfg.optimizer;
    let mut sgd = Sgd::new(opt.lr, opt.momentum, opt.weight_decay)?;
    let mut params = init.clone();
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.local_epochs);

    let as_divergence = |e: Error| match e {
        Error::NonFinite(_) => diverged(),
        other => other,
    };
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&k| labels[k]).collect();
            let trace = forward(&params, xb.view())?;
            let (mut loss, logit_grads) = match strategy {
                Strategy::FedAbc(loss_cfg) => {
                    let r = client_empirical_loss(trace.logits().view(), &yb, &client.presence, loss_cfg)
                        .map_err(as_divergence)?;
                    (r.loss_value, r.logit_grads)
                }
                _ => softmax_ce(trace.logits().view(), &yb).map_err(as_divergence)?,
            };
            let mut grads = backward(&params, &trace, logit_grads.view())?;
            if let Strategy::FedProxSoftmax { mu } = *strategy {
                if mu > 0.0 {
                    let drift = params.sub(init)?;
                    loss += 0.5 * mu * drift.iter().map(|d| d * d).sum::<f64>();
                    grads.scaled_add(mu, &drift)?;
                }
            }
            sgd.step(&mut params, &grads).map_err(as_divergence)?;
            if !params.is_finite() || !loss.is_finite() {
                return Err(diverged());
            }
            loss_sum += loss;
            batches += 1;
        }
        epoch_losses.push(loss_sum / batches as f64);
    }
    Ok(LocalOutcome {
        params,
        epoch_losses,
    })
}

/// Weighted element-wise average `Σ (n_i / Σ n_j) θ_i`, accumulated in list
/// order. Each entry is clamped into the range of its inputs to absorb
/// rounding, so identical inputs come back unchanged.
pub fn aggregate(updates: &[(&ModelParams, usize)]) -> Result<ModelParams> {
    let (first, _) = updates
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to aggregate".into()))?;
    if let Some(&(_, n)) = updates.iter().find(|(_, n)| *n == 0) {
        return Err(Error::InvalidArgument(format!("update with dataset size {n}")));
    }
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    let mut acc = first.zeros_like();
    let mut lo = (*first).clone();
    let mut hi = (*first).clone();
    for (params, n) in updates {
        acc.scaled_add(*n as f64 / total as f64, params)?;
        for ((l, h), &v) in lo.iter_mut().zip(hi.iter_mut()).zip(params.iter()) {
            *l = l.min(v);
            *h = h.max(v);
        }
    }
    for ((a, &l), &h) in acc.iter_mut().zip(lo.iter()).zip(hi.iter()) {
        *a = a.clamp(l, h);
    }
    Ok(acc)
}

pub fn aggregate_uniform(updates: &[&ModelParams]) -> Result<ModelParams> {
    let sized: Vec<_> = updates.iter().map(|p| (*p, 1)).collect();
    aggregate(&sized)
}

/// Server-side state between rounds.
#[derive(Debug, Clone)]
pub struct FederationState {
    pub round: usize,
    pub global: ModelParams,
    /// Indexed by client id.
    pub personalized: Vec<ModelParams>,
    selection_rng: Rng,
}

impl FederationState {
    /// Broadcasts `initial` to all `num_clients` clients.
    pub fn new(initial: ModelParams, num_clients: usize, seed: u64) -> Self {
        Self {
            round: 0,
            personalized: vec![initial.clone(); num_clients],
            global: initial,
            selection_rng: rng::derived(seed, &[stream::SELECTION]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RoundReport {
    /// Sampled client ids, ascending.
    pub selected: Vec<usize>,
    /// Mean over the sampled clients of their mean local epoch loss.
    pub mean_train_loss: f64,
}

fn check_client_ids(clients: &[ClientDataset]) -> Result<()> {
    match clients.iter().enumerate().find(|(k, c)| c.client_id != *k) {
        Some((k, c)) => Err(Error::InvalidArgument(format!(
            "client at position {k} has id {}",
            c.client_id
        ))),
        None => Ok(()),
    }
}

pub fn run_round(
    state: &mut FederationState,
    clients: &[ClientDataset],
    strategy: &Strategy,
    cfg: &FederationConfig,
) -> Result<RoundReport> {
    check_client_ids(clients)?;
    if state.personalized.len() != clients.len() {
        return Err(Error::InvalidArgument(format!(
            "{} personalized models for {} clients",
            state.personalized.len(),
            clients.len()
        )));
    }
    let k = cfg.clients_per_round(clients.len());
    let mut selected = index::sample(&mut state.selection_rng, clients.len(), k).into_vec();
    selected.sort_unstable();

    let round = state.round;
    let train_one = |&id: &usize| {
        let start = if strategy.aggregates() {
            &state.global
        } else {
            &state.personalized[id]
        };
        local_train(start, &clients[id], strategy, cfg, round)
    };
    let outcomes: Vec<LocalOutcome> = if cfg.parallel_clients {
        selected.par_iter().map(train_one).collect::<Result<_>>()?
    } else {
        selected.iter().map(train_one).collect::<Result<_>>()?
    };

    let mean_train_loss = outcomes
        .iter()
        .map(|o| o.epoch_losses.iter().sum::<f64>() / o.epoch_losses.len() as f64)
        .sum::<f64>()
        / outcomes.len() as f64;

    if strategy.aggregates() {
        state.global = match cfg.aggregation {
            Aggregation::Weighted => {
                let updates: Vec<_> = selected
                    .iter()
                    .zip(&outcomes)
                    .map(|(&id, o)| (&o.params, clients[id].train.len()))
                    .collect();
                aggregate(&updates)?
            }
            Aggregation::Uniform => {
                aggregate_uniform(&outcomes.iter().map(|o| &o.params).collect::<Vec<_>>())?
            }
        };
    }
    for (&id, outcome) in selected.iter().zip(outcomes) {
        state.personalized[id] = outcome.params;
    }
    state.round += 1;
    Ok(RoundReport {
        selected,
        mean_train_loss,
    })
}

#[derive(Debug, Clone)]
pub struct FederationOutput {
    pub personalized: Vec<ModelParams>,
    pub global: ModelParams,
    /// One record per round, rounds numbered from 1.
    pub metrics: Vec<MetricsRecord>,
}

/// Seeded initial model for the given data shape.
pub fn initial_model(cfg: &FederationConfig, input: usize, classes: usize) -> Result<ModelParams> {
    ModelParams::init(
        &cfg.architecture(input, classes),
        &mut rng::derived(cfg.seed, &[stream::INIT]),
    )
}

/// Runs `cfg.rounds` rounds from a freshly initialized model, evaluating
/// after every round.
pub fn run_federation(
    clients: &[ClientDataset],
    strategy: &Strategy,
    cfg: &FederationConfig,
    iid: &IidTestSet,
) -> Result<FederationOutput> {
    strategy.validate()?;
    cfg.validate()?;
    let first = clients
        .first()
        .ok_or_else(|| Error::InvalidArgument("no clients".into()))?;
    check_client_ids(clients)?;
    let input = first
        .train
        .first()
        .ok_or_else(|| Error::InvalidArgument("client 0 has no training samples".into()))?
        .features
        .len();
    let initial = initial_model(cfg, input, first.num_classes())?;
    let mut state = FederationState::new(initial, clients.len(), cfg.seed);
    let mut metrics = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let report = run_round(&mut state, clients, strategy, cfg)?;
        metrics.push(evaluate_round(
            state.round,
            &state.personalized,
            &state.global,
            clients,
            iid,
            report.mean_train_loss,
        )?);
    }
    Ok(FederationOutput {
        personalized: state.personalized,
        global: state.global,
        metrics,
    })
}
