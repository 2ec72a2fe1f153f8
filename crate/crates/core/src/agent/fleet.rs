//! Drives many agents against one ledger, one protocol round per [`Fleet::step`].
//!
//! Every agent runs one loop iteration per step. Bids from all agents are
//! submitted concurrently; the ledger's deterministic ordering decides who
//! registers. Winners then push concurrently and signal. The threaded
//! schedule computes the same per-agent work on worker threads that share
//! only a submission queue and a read-only contract snapshot; because the
//! ledger orders by `(submit_time, seeded sender rank, nonce)` and every
//! agent draws from its own stream, both schedules commit identical
//! transaction sequences.

use std::collections::{BTreeMap, HashMap};
use std::thread;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Agent, AgentError, Prepared, RoundOutcome};
use crate::contract::{wire, BidOutcome, Phase, PhaseChange, PushOutcome, SmartContract, TxEffect, TxOutcome};
use crate::ledger::{AgentId, Committed, Ledger, Tick, Transaction, TxKind};
use crate::params::ParamVector;
use crate::seed::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Agents processed one after another on the calling thread.
    #[default]
    Lockstep,
    /// Agents split across worker threads.
    Threaded { workers: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FleetConfig {
    pub schedule: Schedule,
    /// Chance that a registered agent never signals, forcing a timeout close.
    pub signal_drop_probability: f64,
    pub fault_seed: u64,
    pub record_trace: bool,
}

impl Default for FleetConfig {
    fn default() -> Self {
        Self { schedule: Schedule::Lockstep, signal_drop_probability: 0.0, fault_seed: 0, record_trace: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidRecord {
    pub agent: AgentId,
    pub chunks: Vec<usize>,
    pub seq: u64,
    pub outcome: Result<BidOutcome, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushRecord {
    pub agent: AgentId,
    pub chunk: usize,
    pub seq: u64,
    pub outcome: Result<PushOutcome, String>,
}

/// Everything committed in one protocol round, for offline invariant checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: u64,
    pub participation_level: usize,
    pub budgets: BTreeMap<AgentId, usize>,
    pub bids: Vec<BidRecord>,
    pub registered: Vec<AgentId>,
    pub winners: BTreeMap<usize, AgentId>,
    pub pushes: Vec<PushRecord>,
    pub phases: Vec<PhaseChange>,
    pub digest_after: [u8; 32],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRound {
    pub round: u64,
    /// The participation level was reached and pushes were allowed.
    pub started: bool,
    pub closed: bool,
    pub timed_out: bool,
    /// One entry per agent, in fleet order.
    pub outcomes: Vec<RoundOutcome>,
    pub gas: u64,
    pub push_ticks: Tick,
    pub stored: usize,
    pub end_time: Tick,
    pub trace: Option<RoundTrace>,
}

pub struct Fleet {
    agents: Vec<Agent>,
    index: HashMap<AgentId, usize>,
    ledger: Ledger<SmartContract>,
    config: FleetConfig,
    faults: StreamRng,
}

type Phase1 = Result<(Prepared, Option<Transaction>), AgentError>;

fn phase_one(agent: &mut Agent, contract: &SmartContract, global: &ParamVector, t0: Tick) -> Phase1 {
    let prepared = agent.prepare(global, t0)?;
    let bid = if contract.phase() == Phase::AcceptingBids && !contract.is_registered(agent.id()) {
        Some(agent.bid_tx(contract.scheme(), contract.round(), prepared.ready_time)?)
    } else {
        None
    };
    Ok((prepared, bid))
}

pub(crate) fn run_workers<T: Send>(
    agents: &mut [Agent],
    workers: usize,
    f: impl Fn(&mut Agent) -> T + Sync,
) -> Vec<T> {
    let per = agents.len().div_ceil(workers.max(1)).max(1);
    let f = &f;
    thread::scope(|s| {
        let handles: Vec<_> = agents
            .chunks_mut(per)
            .map(|slice| s.spawn(move || slice.iter_mut().map(f).collect::<Vec<T>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("agent worker panicked")).collect()
    })
}

impl Fleet {
    pub fn new(agents: Vec<Agent>, ledger: Ledger<SmartContract>, config: FleetConfig) -> Result<Self, AgentError> {
        let index: HashMap<AgentId, usize> = agents.iter().enumerate().map(|(i, a)| (a.id(), i)).collect();
        if index.len() != agents.len() {
            return Err(AgentError::Config("agent ids must be distinct".into()));
        }
        let level = ledger.machine().participation_level();
        if level > agents.len() {
            return Err(AgentError::Config(format!("participation level {level} exceeds fleet size {}", agents.len())));
        }
        let chunks = ledger.machine().scheme().chunk_count();
        if let Some(a) = agents.iter().find(|a| a.budget() > chunks) {
            return Err(AgentError::Config(format!("budget {} of {} exceeds chunk count {chunks}", a.budget(), a.id())));
        }
        if let Schedule::Threaded { workers: 0 } = config.schedule {
            return Err(AgentError::Config("threaded schedule needs at least one worker".into()));
        }
        let faults = seed::stream(config.fault_seed, &[seed::tag::FAULTS]);
        Ok(Self { agents, index, ledger, config, faults })
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn ledger(&self) -> &Ledger<SmartContract> {
        &self.ledger
    }

    pub fn contract(&self) -> &SmartContract {
        self.ledger.machine()
    }

    pub fn into_parts(self) -> (Vec<Agent>, Ledger<SmartContract>) {
        (self.agents, self.ledger)
    }

    fn record(
        &self,
        committed: &[Committed<TxOutcome>],
        outcomes: &mut [RoundOutcome],
        trace: &mut Option<RoundTrace>,
    ) {
        for c in committed {
            if let Some(&i) = self.index.get(&c.tx.sender) {
                outcomes[i].note(c);
            }
            let Some(t) = trace.as_mut() else { continue };
            match c.tx.kind {
                TxKind::Bid => t.bids.push(BidRecord {
                    agent: c.tx.sender,
                    chunks: wire::decode_bid(&c.tx.payload)
                        .map(|(_, e)| e.iter().map(|&(id, _)| id as usize).collect())
                        .unwrap_or_default(),
                    seq: c.tx.seq,
                    outcome: match &c.outcome {
                        Ok(TxEffect::Bid(b)) => Ok(*b),
                        other => Err(format!("{other:?}")),
                    },
                }),
                TxKind::Push => t.pushes.push(PushRecord {
                    agent: c.tx.sender,
                    chunk: wire::decode_push(&c.tx.payload).map_or(usize::MAX, |(_, id, _)| id as usize),
                    seq: c.tx.seq,
                    outcome: match &c.outcome {
                        Ok(TxEffect::Push(p)) => Ok(*p),
                        other => Err(format!("{other:?}")),
                    },
                }),
                _ => {}
            }
        }
    }

    fn submit_batch(&mut self, batch: Vec<Transaction>, outcomes: &mut [RoundOutcome]) -> HashMap<AgentId, Tick> {
        let mut last_commit = HashMap::new();
        for tx in self.ledger.order_concurrent(batch) {
            let sender = tx.sender;
            match self.ledger.enqueue(tx) {
                Ok(_) => {
                    last_commit.insert(sender, self.ledger.last_commit_time());
                }
                Err(e) => {
                    if let Some(&i) = self.index.get(&sender) {
                        outcomes[i].errors.push(e.to_string());
                    }
                }
            }
        }
        last_commit
    }

    /// Run one protocol round: every agent iterates once; the round closes by
    /// signals or, failing that, by the push deadline.
    pub fn step(&mut self) -> Result<ProtocolRound, AgentError> {
        let t0 = self.ledger.now();
        let round = self.ledger.machine().round();
        let history_start = self.ledger.machine().history().len();
        let global = self.ledger.machine().global_model()?;
        let mut outcomes: Vec<RoundOutcome> = self
            .agents
            .iter()
            .map(|a| RoundOutcome { round, agent: a.id().0, ..RoundOutcome::default() })
            .collect();
        let mut trace = self.config.record_trace.then(|| RoundTrace {
            round,
            participation_level: self.ledger.machine().participation_level(),
            budgets: self.agents.iter().map(|a| (a.id(), a.budget())).collect(),
            bids: Vec::new(),
            registered: Vec::new(),
            winners: BTreeMap::new(),
            pushes: Vec::new(),
            phases: Vec::new(),
            digest_after: [0; 32],
        });

        // Phase 1: collect, train, bid.
        let contract = self.ledger.machine();
        let results: Vec<Phase1> = match self.config.schedule {
            Schedule::Lockstep => self.agents.iter_mut().map(|a| phase_one(a, contract, &global, t0)).collect(),
            Schedule::Threaded { workers } => {
                run_workers(&mut self.agents, workers, |a| phase_one(a, contract, &global, t0))
            }
        };
        let mut bids = Vec::new();
        for (out, r) in outcomes.iter_mut().zip(results) {
            match r {
                Ok((p, bid)) => {
                    out.training_loss = p.stats.loss;
                    out.train_steps = p.stats.steps;
                    if let Some(tx) = bid {
                        out.bids = wire::decode_bid(&tx.payload).map_or(0, |(_, e)| e.len());
                        bids.push(tx);
                    }
                }
                Err(AgentError::Train(e)) => return Err(AgentError::Train(e)),
                Err(e) => out.errors.push(e.to_string()),
            }
        }
        self.submit_batch(bids, &mut outcomes);
        let committed = self.ledger.flush();
        self.record(&committed, &mut outcomes, &mut trace);

        // Phases 2 and 3: winners push, registered agents signal.
        let started = self.ledger.machine().phase() == Phase::Pushing && self.ledger.machine().round() == round;
        let mut timed_out = false;
        if started {
            let contract = self.ledger.machine();
            let c_l = contract.round_started_at();
            let registered = contract.registered_agents().to_vec();
            if let Some(t) = trace.as_mut() {
                t.registered = registered.clone();
                t.winners = contract.resolve_chunk_winners()?;
            }
            let pushers: Vec<usize> = registered.iter().filter_map(|a| self.index.get(a).copied()).collect();
            let build = |a: &mut Agent| {
                if contract.is_registered(a.id()) {
                    Some(a.winning_pushes(contract, c_l))
                } else {
                    None
                }
            };
            let built: Vec<Option<Result<Vec<Transaction>, AgentError>>> = match self.config.schedule {
                Schedule::Lockstep => self.agents.iter_mut().map(build).collect(),
                Schedule::Threaded { workers } => run_workers(&mut self.agents, workers, build),
            };
            let mut pushes = Vec::new();
            for (out, b) in outcomes.iter_mut().zip(built) {
                match b {
                    Some(Ok(txs)) => {
                        out.registered = true;
                        out.wins = txs.len();
                        pushes.extend(txs);
                    }
                    Some(Err(e)) => out.errors.push(e.to_string()),
                    None => {}
                }
            }
            let last_push = self.submit_batch(pushes, &mut outcomes);
            let mut signals = Vec::new();
            for i in pushers {
                let drop = self.faults.gen::<f64>() < self.config.signal_drop_probability;
                if drop {
                    continue;
                }
                let agent = &mut self.agents[i];
                let at = last_push.get(&agent.id()).copied().unwrap_or(c_l);
                signals.push(agent.signal_tx(round, at));
            }
            self.submit_batch(signals, &mut outcomes);
            let committed = self.ledger.flush();
            self.record(&committed, &mut outcomes, &mut trace);
            let contract = self.ledger.machine();
            if contract.round() == round {
                if let Some(deadline) = contract.push_deadline() {
                    self.ledger.advance_to(deadline);
                    timed_out = true;
                }
            }
        }

        let receipts = self.ledger.take_receipts();
        let contract = self.ledger.machine();
        if let Some(t) = trace.as_mut() {
            t.phases = contract.history()[history_start..].to_vec();
            t.digest_after = contract.digest();
        }
        Ok(ProtocolRound {
            round,
            started,
            closed: contract.round() > round,
            timed_out,
            gas: receipts.iter().map(|r| r.gas).sum(),
            push_ticks: outcomes.iter().map(|o| o.push_ticks).sum(),
            stored: outcomes.iter().map(|o| o.pushes).sum(),
            end_time: self.ledger.now(),
            outcomes,
            trace,
        })
    }

    pub fn run(&mut self, rounds: usize) -> Result<Vec<ProtocolRound>, AgentError> {
        (0..rounds).map(|_| self.step()).collect()
    }
}
