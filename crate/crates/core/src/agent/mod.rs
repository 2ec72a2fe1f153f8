//! Client-side loop: pull the global model, average, train locally, bid on a
//! random budget of chunks, push the chunks won, signal close.

pub mod fleet;

use std::io;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contract::{wire, BidOutcome, ContractError, Phase, PushOutcome, SmartContract, TxEffect, TxOutcome};
use crate::ledger::{AgentId, Committed, Ledger, LedgerError, Tick, Transaction, TxKind};
use crate::params::{encode_slice, score_chunk, ParamError, ParamVector, PartitionScheme};
use crate::seed::{self, StreamRng};

pub use fleet::{Fleet, FleetConfig, ProtocolRound, RoundTrace, Schedule};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub loss: f64,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Divergence { iteration: u64, loss: f64 },
    #[error("training data: {0}")]
    Data(String),
}

/// Local learning step. Implementations observe their own data for
/// `iteration` and update `model` in place.
pub trait LocalTrainer: Send {
    fn train(&mut self, iteration: u64, model: &mut [f32]) -> Result<TrainStats, TrainError>;
}

/// Where the local gradient is taken relative to averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    /// Average the pulled global into the local model, then train from there.
    #[default]
    AverageThenTrain,
    /// Train a copy of the pulled global, then average it with the global:
    /// the result is `g - (eta/2) * grad f(g)` for one gradient step.
    TrainFromGlobalThenAverage,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("invalid agent configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Simulated time spent between pulls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Timing {
    pub collection_ticks: Tick,
    /// Uniform extra delay in `0..=collection_jitter_ticks`, drawn per iteration.
    pub collection_jitter_ticks: Tick,
    pub ticks_per_train_step: Tick,
}

impl Default for Timing {
    fn default() -> Self {
        Self { collection_ticks: 1_000, collection_jitter_ticks: 500, ticks_per_train_step: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prepared {
    pub stats: TrainStats,
    pub ready_time: Tick,
}

pub struct Agent {
    id: AgentId,
    budget: usize,
    order: UpdateOrder,
    timing: Timing,
    rng: StreamRng,
    local: ParamVector,
    last_pulled: ParamVector,
    iteration: u64,
    nonce: u64,
    last_bid: Vec<usize>,
    trainer: Box<dyn LocalTrainer>,
}

impl std::fmt::Debug for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agent")
            .field("id", &self.id)
            .field("budget", &self.budget)
            .field("iteration", &self.iteration)
            .finish_non_exhaustive()
    }
}

impl Agent {
    pub fn new(
        id: AgentId,
        initial: ParamVector,
        budget: usize,
        base_seed: u64,
        trainer: Box<dyn LocalTrainer>,
    ) -> Result<Self, AgentError> {
        if budget == 0 {
            return Err(AgentError::Config("budget must be at least 1".into()));
        }
        initial.check_finite()?;
        Ok(Self {
            id,
            budget,
            order: UpdateOrder::default(),
            timing: Timing::default(),
            rng: seed::stream(base_seed, &[seed::tag::AGENT, u64::from(id.0)]),
            last_pulled: initial.clone(),
            local: initial,
            iteration: 0,
            nonce: 0,
            last_bid: Vec::new(),
            trainer,
        })
    }

    pub fn with_order(mut self, order: UpdateOrder) -> Self {
        self.order = order;
        self
    }

    pub fn with_timing(mut self, timing: Timing) -> Self {
        self.timing = timing;
        self
    }

    pub fn id(&self) -> AgentId {
        self.id
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn local_model(&self) -> &ParamVector {
        &self.local
    }

    pub fn last_pulled(&self) -> &ParamVector {
        &self.last_pulled
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Chunk ids of the most recent bid, ascending.
    pub fn last_bid(&self) -> &[usize] {
        &self.last_bid
    }

    /// Elementwise `(global + local) / 2`, remembering `global` for scoring.
    pub fn average_with(&mut self, global: &ParamVector) -> Result<(), AgentError> {
        if global.len() != self.local.len() {
            return Err(ParamError::LengthMismatch { expected: self.local.len(), actual: global.len() }.into());
        }
        for (l, &g) in self.local.as_mut_slice().iter_mut().zip(global.as_slice()) {
            *l = 0.5 * (*l + g);
        }
        self.last_pulled = global.clone();
        Ok(())
    }

    pub fn pull_and_average(&mut self, contract: &SmartContract) -> Result<(), AgentError> {
        let global = contract.global_model()?;
        self.average_with(&global)
    }

    /// Pull `global`, average and train according to the update order.
    pub fn prepare(&mut self, global: &ParamVector, t0: Tick) -> Result<Prepared, AgentError> {
        let stats = match self.order {
            UpdateOrder::AverageThenTrain => {
                self.average_with(global)?;
                self.trainer.train(self.iteration, self.local.as_mut_slice())?
            }
            UpdateOrder::TrainFromGlobalThenAverage => {
                let mut trained = global.clone();
                let stats = self.trainer.train(self.iteration, trained.as_mut_slice())?;
                self.local = trained;
                self.average_with(global)?;
                stats
            }
        };
        self.local.check_finite()?;
        self.iteration += 1;
        let jitter = self.rng.gen_range(0..=self.timing.collection_jitter_ticks);
        let ready_time = t0 + self.timing.collection_ticks + jitter + stats.steps * self.timing.ticks_per_train_step;
        Ok(Prepared { stats, ready_time })
    }

    /// Uniform sample of `B` distinct chunk ids, ascending.
    pub fn select_chunks(&mut self, chunk_count: usize) -> Result<Vec<usize>, AgentError> {
        if self.budget > chunk_count {
            return Err(AgentError::Config(format!("budget {} exceeds chunk count {chunk_count}", self.budget)));
        }
        let mut ids = sample(&mut self.rng, chunk_count, self.budget).into_vec();
        ids.sort_unstable();
        Ok(ids)
    }

    /// Score every selected chunk against the global copy pulled this iteration.
    pub fn score(&self, scheme: &PartitionScheme, ids: &[usize]) -> Result<Vec<(u32, f64)>, AgentError> {
        ids.iter()
            .map(|&c| {
                let r = scheme.range(c)?;
                let s = score_chunk(&self.local.as_slice()[r.clone()], &self.last_pulled.as_slice()[r])?;
                Ok((c as u32, s))
            })
            .collect()
    }

    fn next_tx(&mut self, kind: TxKind, payload: Vec<u8>, at: Tick) -> Transaction {
        let tx = Transaction::new(self.id, kind, payload, at).with_nonce(self.nonce);
        self.nonce += 1;
        tx
    }

    pub fn bid_tx(&mut self, scheme: &PartitionScheme, round: u64, at: Tick) -> Result<Transaction, AgentError> {
        let ids = self.select_chunks(scheme.chunk_count())?;
        let entries = self.score(scheme, &ids)?;
        self.last_bid = ids;
        Ok(self.next_tx(TxKind::Bid, wire::encode_bid(round as u32, &entries), at))
    }

    /// Transaction carrying the local value of `chunk_id`, without any bid.
    pub fn push_tx(
        &mut self,
        scheme: &PartitionScheme,
        round: u64,
        chunk_id: usize,
        at: Tick,
    ) -> Result<Transaction, AgentError> {
        let payload = encode_slice(&self.local.as_slice()[scheme.range(chunk_id)?])?;
        Ok(self.next_tx(TxKind::Push, wire::encode_push(round as u32, chunk_id as u32, &payload), at))
    }

    /// Push transactions for every chunk this agent won in the current round.
    /// Only chunks from its own last bid are ever pushed.
    pub fn winning_pushes(&mut self, contract: &SmartContract, at: Tick) -> Result<Vec<Transaction>, AgentError> {
        let winners = contract.resolve_chunk_winners()?;
        let won: Vec<usize> =
            self.last_bid.iter().copied().filter(|c| winners.get(c) == Some(&self.id)).collect();
        won.into_iter().map(|c| self.push_tx(contract.scheme(), contract.round(), c, at)).collect()
    }

    pub fn signal_tx(&mut self, round: u64, at: Tick) -> Transaction {
        self.next_tx(TxKind::Signal, wire::encode_signal(round as u32), at)
    }

    /// Start a fresh local model from `model`, e.g. after a restart.
    pub fn reset_local(&mut self, model: ParamVector) {
        self.local = model;
    }
}

/// What one agent did in one protocol round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub round: u64,
    pub agent: u32,
    /// Bid entries submitted; 0 when the round was not open to this agent.
    pub bids: usize,
    pub registered: bool,
    pub rejected: bool,
    pub wins: usize,
    pub pushes: usize,
    pub gas: u64,
    pub push_ticks: Tick,
    pub training_loss: f64,
    pub train_steps: u64,
    pub errors: Vec<String>,
}

impl RoundOutcome {
    fn note(&mut self, committed: &Committed<TxOutcome>) {
        self.gas += committed.receipt.gas_used;
        match &committed.outcome {
            Ok(TxEffect::Bid(BidOutcome::Accepted)) => self.registered = true,
            Ok(TxEffect::Bid(_)) => self.rejected = true,
            Ok(TxEffect::Push(p)) => {
                self.push_ticks += committed.tx.commit_time - committed.tx.submit_time;
                if *p == PushOutcome::Stored {
                    self.pushes += 1;
                } else {
                    self.errors.push(format!("push {p:?}"));
                }
            }
            Ok(_) => {}
            Err(e) => self.errors.push(e.to_string()),
        }
    }
}

/// Drive one agent through one loop iteration against a ledger, committing
/// each transaction before the next step.
pub fn run_round(agent: &mut Agent, ledger: &mut Ledger<SmartContract>) -> Result<RoundOutcome, AgentError> {
    let global = ledger.machine().global_model()?;
    let prepared = agent.prepare(&global, ledger.now())?;
    let round = ledger.machine().round();
    let mut out = RoundOutcome {
        round,
        agent: agent.id().0,
        training_loss: prepared.stats.loss,
        train_steps: prepared.stats.steps,
        ..RoundOutcome::default()
    };
    let contract = ledger.machine();
    if contract.phase() == Phase::AcceptingBids && !contract.is_registered(agent.id()) {
        let tx = agent.bid_tx(contract.scheme(), round, prepared.ready_time)?;
        out.bids = agent.last_bid().len();
        match ledger.submit(tx) {
            Ok(c) => out.note(&c),
            Err(e) => out.errors.push(e.to_string()),
        }
    }
    let contract = ledger.machine();
    if contract.phase() == Phase::Pushing && contract.is_registered(agent.id()) && !contract.has_signaled(agent.id()) {
        out.registered = true;
        let at = ledger.now().max(prepared.ready_time);
        let pushes = agent.winning_pushes(contract, at)?;
        out.wins = pushes.len();
        for tx in pushes {
            match ledger.submit(tx) {
                Ok(c) => out.note(&c),
                Err(e) => out.errors.push(e.to_string()),
            }
        }
        let signal = agent.signal_tx(round, ledger.now());
        match ledger.submit(signal) {
            Ok(c) => out.note(&c),
            Err(e) => out.errors.push(e.to_string()),
        }
    }
    Ok(out)
}

/// Trainer that perturbs every parameter with independent uniform noise.
/// Scores are then exchangeable across agents, which makes chunk winners
/// uniform among bidders.
pub struct NoiseTrainer {
    rng: StreamRng,
    scale: f32,
}

impl NoiseTrainer {
    pub fn new(seed: u64, scale: f32) -> Self {
        Self { rng: seed::stream(seed, &[seed::tag::TRAINER]), scale }
    }
}

impl LocalTrainer for NoiseTrainer {
    fn train(&mut self, _iteration: u64, model: &mut [f32]) -> Result<TrainStats, TrainError> {
        for w in model.iter_mut() {
            *w += self.scale * (self.rng.gen::<f32>() - 0.5);
        }
        Ok(TrainStats { loss: 0.0, steps: 1 })
    }
}

/// Per-agent outcome log: `policy, round, agent, bids, wins, pushes, gas, push_ticks, training_loss`.
pub fn write_outcomes_csv<'a, W: io::Write>(
    policy: &str,
    outcomes: impl IntoIterator<Item = &'a RoundOutcome>,
    w: W,
) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["policy", "round", "agent", "bids", "wins", "pushes", "gas", "push_ticks", "training_loss"])?;
    for o in outcomes {
        wtr.write_record([
            policy.to_string(),
            o.round.to_string(),
            o.agent.to_string(),
            o.bids.to_string(),
            o.wins.to_string(),
            o.pushes.to_string(),
            o.gas.to_string(),
            o.push_ticks.to_string(),
            format!("{:.9e}", o.training_loss),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
