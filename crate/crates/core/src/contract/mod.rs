//! The coordination contract as a deterministic state machine.
//!
//! A round moves through three phases. While `AcceptingBids`, the first `L`
//! distinct agents to bid are registered; the `L`-th acceptance resolves one
//! winner per contested chunk (highest score, earliest arrival on ties) and
//! opens `Pushing`. Winners push their chunks and every registered agent
//! signals; the last signal (or the push deadline) closes the round and opens
//! the next one with all bids cleared.

pub mod wire;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ledger::{storage_words, AgentId, Applied, StateMachine, Tick, Transaction, TxKind};
use crate::params::{encode_slice, ParamError, ParamVector, PartitionScheme, BYTES_PER_PARAM, MAX_TX_PAYLOAD_BYTES};
use wire::{WireError, BID_ENTRY_BYTES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    AcceptingBids,
    Pushing,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseChange {
    pub round: u64,
    pub phase: Phase,
    pub at: Tick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bid {
    pub agent_id: AgentId,
    pub round: u64,
    /// `(chunk_id, score)` pairs.
    pub entries: Vec<(usize, f64)>,
    pub arrival_seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkBid {
    pub agent: AgentId,
    pub score: f64,
    pub arrival_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkCore {
    pub chunk_id: usize,
    pub last_updated_round: u64,
    pub last_updated_time: Tick,
    pub last_updater: Option<AgentId>,
    pub current_bids: Vec<ChunkBid>,
    pub stored_payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BidOutcome {
    Accepted,
    RejectedRoundFull,
    RejectedDuplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PushOutcome {
    Stored,
    RejectedNotWinner,
    RejectedSize,
    /// Payload does not decode to the chunk's parameter count of finite values.
    RejectedMalformed,
    /// The winner already stored this chunk in the current round.
    RejectedDuplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignalOutcome {
    Acknowledged,
    RoundClosed,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContractError {
    #[error("registration failed: {0}")]
    Registration(String),
    #[error("stale round: contract is in round {current}, transaction targets {requested}")]
    StaleRound { current: u64, requested: u64 },
    #[error("operation requires phase {expected:?}, contract is {actual:?}")]
    WrongPhase { expected: Phase, actual: Phase },
    #[error("{0} is not registered for the current round")]
    Unauthorized(AgentId),
    #[error("chunk id {chunk_id} out of range (chunk count {chunk_count})")]
    ChunkIndex { chunk_id: usize, chunk_count: usize },
    #[error("invalid bid: {0}")]
    InvalidBid(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContractConfig {
    /// Deadline for the push phase, measured from the round's start.
    pub push_timeout_ticks: Tick,
    pub max_tx_payload_bytes: usize,
}

impl Default for ContractConfig {
    fn default() -> Self {
        Self { push_timeout_ticks: 10_000, max_tx_payload_bytes: MAX_TX_PAYLOAD_BYTES }
    }
}

/// Result of a committed contract transaction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TxEffect {
    Registered(ModelId),
    Bid(BidOutcome),
    Push(PushOutcome),
    Signal(SignalOutcome),
}

pub type TxOutcome = Result<TxEffect, ContractError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChunkRead<'a> {
    pub payload: &'a [u8],
    pub last_updated_round: u64,
    pub last_updater: Option<AgentId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmartContract {
    model_id: ModelId,
    scheme: PartitionScheme,
    participation_level: usize,
    config: ContractConfig,
    round: u64,
    phase: Phase,
    registered: Vec<AgentId>,
    signaled: BTreeSet<AgentId>,
    winners: BTreeMap<usize, AgentId>,
    stored_this_round: BTreeSet<usize>,
    round_started_at: Tick,
    chunk_cores: Vec<ChunkCore>,
    history: Vec<PhaseChange>,
    timeouts: u64,
}

impl SmartContract {
    /// Deploy a contract for one learning task, seeding every chunk from `initial_model`.
    pub fn register_model(
        scheme: PartitionScheme,
        participation_level: usize,
        initial_model: &ParamVector,
        config: ContractConfig,
    ) -> Result<Self, ContractError> {
        if participation_level == 0 {
            return Err(ContractError::Registration("participation level must be at least 1".into()));
        }
        if initial_model.len() != scheme.total_params() {
            return Err(ContractError::Registration(format!(
                "initial model has {} parameters, scheme expects {}",
                initial_model.len(),
                scheme.total_params()
            )));
        }
        if scheme.chunk_size_bytes() > config.max_tx_payload_bytes {
            return Err(ContractError::Registration(format!(
                "chunk size {} B exceeds the {} B transaction limit",
                scheme.chunk_size_bytes(),
                config.max_tx_payload_bytes
            )));
        }
        let mut hasher = Sha256::new();
        hasher.update((scheme.total_params() as u64).to_le_bytes());
        hasher.update((scheme.chunk_size_bytes() as u64).to_le_bytes());
        hasher.update((participation_level as u64).to_le_bytes());
        let mut chunk_cores = Vec::with_capacity(scheme.chunk_count());
        for chunk_id in 0..scheme.chunk_count() {
            let payload = encode_slice(&initial_model.as_slice()[scheme.range(chunk_id)?])?;
            hasher.update(&payload);
            chunk_cores.push(ChunkCore {
                chunk_id,
                last_updated_round: 0,
                last_updated_time: 0,
                last_updater: None,
                current_bids: Vec::new(),
                stored_payload: payload,
            });
        }
        let digest = hasher.finalize();
        let model_id = ModelId(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")));
        Ok(Self {
            model_id,
            scheme,
            participation_level,
            config,
            round: 0,
            phase: Phase::AcceptingBids,
            registered: Vec::new(),
            signaled: BTreeSet::new(),
            winners: BTreeMap::new(),
            stored_this_round: BTreeSet::new(),
            round_started_at: 0,
            chunk_cores,
            history: vec![PhaseChange { round: 0, phase: Phase::AcceptingBids, at: 0 }],
            timeouts: 0,
        })
    }

    pub fn model_id(&self) -> ModelId {
        self.model_id
    }

    pub fn scheme(&self) -> &PartitionScheme {
        &self.scheme
    }

    pub fn participation_level(&self) -> usize {
        self.participation_level
    }

    pub fn config(&self) -> &ContractConfig {
        &self.config
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn registered_agents(&self) -> &[AgentId] {
        &self.registered
    }

    pub fn is_registered(&self, agent: AgentId) -> bool {
        self.registered.contains(&agent)
    }

    pub fn has_signaled(&self, agent: AgentId) -> bool {
        self.signaled.contains(&agent)
    }

    pub fn chunk_cores(&self) -> &[ChunkCore] {
        &self.chunk_cores
    }

    /// Every phase change since deployment, in order.
    pub fn history(&self) -> &[PhaseChange] {
        &self.history
    }

    /// Rounds closed by the push deadline rather than by signals.
    pub fn timeouts(&self) -> u64 {
        self.timeouts
    }

    /// Tick at which the push phase of the current round began.
    pub fn round_started_at(&self) -> Tick {
        self.round_started_at
    }

    pub fn push_deadline(&self) -> Option<Tick> {
        (self.phase == Phase::Pushing).then(|| self.round_started_at + self.config.push_timeout_ticks)
    }

    fn set_phase(&mut self, phase: Phase, at: Tick) {
        self.phase = phase;
        self.history.push(PhaseChange { round: self.round, phase, at });
    }

    fn check_round(&self, requested: u64) -> Result<(), ContractError> {
        if requested != self.round {
            return Err(ContractError::StaleRound { current: self.round, requested });
        }
        Ok(())
    }

    pub fn submit_bid(&mut self, bid: &Bid, now: Tick) -> Result<BidOutcome, ContractError> {
        self.check_round(bid.round)?;
        let duplicate = self.is_registered(bid.agent_id);
        match self.phase {
            Phase::AcceptingBids => {}
            Phase::Pushing if duplicate => return Ok(BidOutcome::RejectedDuplicate),
            Phase::Pushing => return Ok(BidOutcome::RejectedRoundFull),
            Phase::Closed => {
                return Err(ContractError::WrongPhase { expected: Phase::AcceptingBids, actual: Phase::Closed })
            }
        }
        if duplicate {
            return Ok(BidOutcome::RejectedDuplicate);
        }
        let chunk_count = self.scheme.chunk_count();
        let mut seen = BTreeSet::new();
        for &(chunk_id, score) in &bid.entries {
            if chunk_id >= chunk_count {
                return Err(ContractError::ChunkIndex { chunk_id, chunk_count });
            }
            if !seen.insert(chunk_id) {
                return Err(ContractError::InvalidBid(format!("chunk {chunk_id} appears twice")));
            }
            if !(score.is_finite() && score >= 0.0) {
                return Err(ContractError::InvalidBid(format!("score {score} for chunk {chunk_id}")));
            }
        }
        self.registered.push(bid.agent_id);
        for &(chunk_id, score) in &bid.entries {
            self.chunk_cores[chunk_id].current_bids.push(ChunkBid {
                agent: bid.agent_id,
                score,
                arrival_seq: bid.arrival_seq,
            });
        }
        if self.registered.len() == self.participation_level {
            self.winners = self.compute_winners();
            self.round_started_at = now;
            self.set_phase(Phase::Pushing, now);
        }
        Ok(BidOutcome::Accepted)
    }

    fn compute_winners(&self) -> BTreeMap<usize, AgentId> {
        self.chunk_cores
            .iter()
            .filter_map(|core| {
                core.current_bids
                    .iter()
                    .max_by(|a, b| a.score.total_cmp(&b.score).then(b.arrival_seq.cmp(&a.arrival_seq)))
                    .map(|best| (core.chunk_id, best.agent))
            })
            .collect()
    }

    /// One winner per chunk that received at least one bid.
    pub fn resolve_chunk_winners(&self) -> Result<BTreeMap<usize, AgentId>, ContractError> {
        if self.phase != Phase::Pushing {
            return Err(ContractError::WrongPhase { expected: Phase::Pushing, actual: self.phase });
        }
        Ok(self.winners.clone())
    }

    pub fn push_chunk(
        &mut self,
        agent: AgentId,
        chunk_id: usize,
        payload: &[u8],
        now: Tick,
    ) -> Result<PushOutcome, ContractError> {
        if self.phase != Phase::Pushing {
            return Err(ContractError::WrongPhase { expected: Phase::Pushing, actual: self.phase });
        }
        if !self.is_registered(agent) {
            return Err(ContractError::Unauthorized(agent));
        }
        if payload.len() > self.config.max_tx_payload_bytes {
            return Ok(PushOutcome::RejectedSize);
        }
        let expected_len = self.scheme.chunk_len(chunk_id).map_err(|_| ContractError::ChunkIndex {
            chunk_id,
            chunk_count: self.scheme.chunk_count(),
        })?;
        if self.winners.get(&chunk_id) != Some(&agent) {
            return Ok(PushOutcome::RejectedNotWinner);
        }
        if self.stored_this_round.contains(&chunk_id) {
            return Ok(PushOutcome::RejectedDuplicate);
        }
        let well_formed = payload.len() == expected_len * BYTES_PER_PARAM
            && payload
                .chunks_exact(BYTES_PER_PARAM)
                .all(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]).is_finite());
        if !well_formed {
            return Ok(PushOutcome::RejectedMalformed);
        }
        let core = &mut self.chunk_cores[chunk_id];
        core.stored_payload = payload.to_vec();
        core.last_updater = Some(agent);
        core.last_updated_round = self.round;
        core.last_updated_time = now;
        self.stored_this_round.insert(chunk_id);
        Ok(PushOutcome::Stored)
    }

    pub fn signal_close(&mut self, agent: AgentId, now: Tick) -> Result<SignalOutcome, ContractError> {
        if self.phase != Phase::Pushing {
            return Err(ContractError::WrongPhase { expected: Phase::Pushing, actual: self.phase });
        }
        if !self.is_registered(agent) {
            return Err(ContractError::Unauthorized(agent));
        }
        self.signaled.insert(agent);
        if self.signaled.len() == self.registered.len() {
            self.close_round(now);
            return Ok(SignalOutcome::RoundClosed);
        }
        Ok(SignalOutcome::Acknowledged)
    }

    fn close_round(&mut self, now: Tick) {
        self.set_phase(Phase::Closed, now);
        self.round += 1;
        self.registered.clear();
        self.signaled.clear();
        self.winners.clear();
        self.stored_this_round.clear();
        for core in &mut self.chunk_cores {
            core.current_bids.clear();
        }
        self.set_phase(Phase::AcceptingBids, now);
    }

    /// Close the round if the push deadline has passed. Missing pushes and
    /// signals are forfeited; unpushed chunks keep their previous value.
    pub fn poll_timeout(&mut self, now: Tick) -> bool {
        match self.push_deadline() {
            Some(deadline) if now >= deadline => {
                self.timeouts += 1;
                self.close_round(now);
                true
            }
            _ => false,
        }
    }

    pub fn read_chunk(&self, chunk_id: usize) -> Result<ChunkRead<'_>, ContractError> {
        let core = self.chunk_cores.get(chunk_id).ok_or(ContractError::ChunkIndex {
            chunk_id,
            chunk_count: self.chunk_cores.len(),
        })?;
        Ok(ChunkRead {
            payload: &core.stored_payload,
            last_updated_round: core.last_updated_round,
            last_updater: core.last_updater,
        })
    }

    /// Reassemble the committed global model from every chunk.
    pub fn global_model(&self) -> Result<ParamVector, ContractError> {
        let mut values = Vec::with_capacity(self.scheme.total_params());
        for core in &self.chunk_cores {
            values.extend(crate::params::deserialize_chunk(&core.stored_payload)?);
        }
        Ok(ParamVector::new(values)?)
    }

    /// SHA-256 over the complete state in a canonical byte order.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.model_id.0.to_le_bytes());
        h.update((self.scheme.total_params() as u64).to_le_bytes());
        h.update((self.scheme.chunk_size_bytes() as u64).to_le_bytes());
        h.update((self.participation_level as u64).to_le_bytes());
        h.update(self.round.to_le_bytes());
        h.update([self.phase as u8]);
        h.update(self.round_started_at.to_le_bytes());
        h.update(self.timeouts.to_le_bytes());
        for a in &self.registered {
            h.update(a.0.to_le_bytes());
        }
        h.update([0xFF]);
        for a in &self.signaled {
            h.update(a.0.to_le_bytes());
        }
        h.update([0xFF]);
        for (c, a) in &self.winners {
            h.update((*c as u64).to_le_bytes());
            h.update(a.0.to_le_bytes());
        }
        for core in &self.chunk_cores {
            h.update(core.last_updated_round.to_le_bytes());
            h.update(core.last_updated_time.to_le_bytes());
            h.update(core.last_updater.map_or(u64::MAX, |a| u64::from(a.0)).to_le_bytes());
            for b in &core.current_bids {
                h.update(b.agent.0.to_le_bytes());
                h.update(b.score.to_bits().to_le_bytes());
                h.update(b.arrival_seq.to_le_bytes());
            }
            h.update((core.stored_payload.len() as u64).to_le_bytes());
            h.update(&core.stored_payload);
        }
        h.finalize().into()
    }

    fn apply_tx(&mut self, tx: &Transaction) -> Result<(TxEffect, u64), ContractError> {
        let now = tx.commit_time;
        match tx.kind {
            TxKind::Register => {
                let (total, level) = wire::decode_register(&tx.payload)?;
                if total as usize != self.scheme.total_params() || level as usize != self.participation_level {
                    return Err(ContractError::Registration("contract already deployed with different parameters".into()));
                }
                Ok((TxEffect::Registered(self.model_id), 0))
            }
            TxKind::Bid => {
                let (round, entries) = wire::decode_bid(&tx.payload)?;
                let bid = Bid {
                    agent_id: tx.sender,
                    round: u64::from(round),
                    entries: entries.iter().map(|&(c, s)| (c as usize, s)).collect(),
                    arrival_seq: tx.seq,
                };
                let outcome = self.submit_bid(&bid, now)?;
                let words = match outcome {
                    BidOutcome::Accepted => storage_words(bid.entries.len() * BID_ENTRY_BYTES),
                    _ => 0,
                };
                Ok((TxEffect::Bid(outcome), words))
            }
            TxKind::Push => {
                let (round, chunk_id, body) = wire::decode_push(&tx.payload)?;
                self.check_round(u64::from(round))?;
                let outcome = self.push_chunk(tx.sender, chunk_id as usize, body, now)?;
                let words = match outcome {
                    PushOutcome::Stored => storage_words(body.len()),
                    _ => 0,
                };
                Ok((TxEffect::Push(outcome), words))
            }
            TxKind::Signal => {
                let round = wire::decode_signal(&tx.payload)?;
                self.check_round(u64::from(round))?;
                Ok((TxEffect::Signal(self.signal_close(tx.sender, now)?), 0))
            }
        }
    }
}

impl StateMachine for SmartContract {
    type Outcome = TxOutcome;

    fn apply(&mut self, tx: &Transaction) -> Applied<TxOutcome> {
        match self.apply_tx(tx) {
            Ok((effect, storage_words)) => Applied { outcome: Ok(effect), storage_words },
            Err(e) => Applied { outcome: Err(e), storage_words: 0 },
        }
    }

    fn on_tick(&mut self, now: Tick) {
        self.poll_timeout(now);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{Ledger, LedgerConfig};
    use crate::params::build_partition;

    fn contract(chunks: usize, level: usize) -> SmartContract {
        let scheme = build_partition(chunks * 2, 8).unwrap();
        SmartContract::register_model(scheme, level, &ParamVector::zeros(chunks * 2).unwrap(), ContractConfig::default())
            .unwrap()
    }

    fn bid(agent: u32, round: u64, entries: &[(usize, f64)], seq: u64) -> Bid {
        Bid { agent_id: AgentId(agent), round, entries: entries.to_vec(), arrival_seq: seq }
    }

    fn payload(values: &[f32]) -> Vec<u8> {
        encode_slice(values).unwrap()
    }

    #[test]
    fn registration() {
        let c = contract(5, 4);
        assert_eq!(c.chunk_cores().len(), 5);
        assert_eq!(c.phase(), Phase::AcceptingBids);
        assert_eq!(c.round(), 0);
        let scheme = build_partition(10, 8).unwrap();
        assert!(matches!(
            SmartContract::register_model(scheme.clone(), 0, &ParamVector::zeros(10).unwrap(), ContractConfig::default()),
            Err(ContractError::Registration(_))
        ));
        assert!(matches!(
            SmartContract::register_model(scheme, 1, &ParamVector::zeros(9).unwrap(), ContractConfig::default()),
            Err(ContractError::Registration(_))
        ));
    }

    #[test]
    fn participation_gate_rejects_late_bidder() {
        // Five agents, PL 4, arrivals A1, A3, A5, A4, A2.
        let mut c = contract(5, 4);
        let order = [1, 3, 5, 4, 2];
        let outcomes: Vec<_> = order
            .iter()
            .enumerate()
            .map(|(seq, &a)| c.submit_bid(&bid(a, 0, &[(seq % 5, 1.0)], seq as u64), seq as u64).unwrap())
            .collect();
        assert_eq!(outcomes[..4], [BidOutcome::Accepted; 4]);
        assert_eq!(outcomes[4], BidOutcome::RejectedRoundFull);
        assert_eq!(c.phase(), Phase::Pushing);
        assert_eq!(c.registered_agents(), &[AgentId(1), AgentId(3), AgentId(5), AgentId(4)]);
        assert_eq!(c.signal_close(AgentId(2), 9), Err(ContractError::Unauthorized(AgentId(2))));
    }

    #[test]
    fn single_participant_round() {
        let mut c = contract(2, 1);
        assert_eq!(c.submit_bid(&bid(0, 0, &[(0, 1.0), (1, 1.0)], 0), 0).unwrap(), BidOutcome::Accepted);
        assert_eq!(c.phase(), Phase::Pushing);
        assert_eq!(c.signal_close(AgentId(0), 1).unwrap(), SignalOutcome::RoundClosed);
        assert_eq!(c.round(), 1);
        assert_eq!(c.phase(), Phase::AcceptingBids);
    }

    #[test]
    fn duplicate_and_stale() {
        let mut c = contract(2, 2);
        assert_eq!(c.submit_bid(&bid(0, 0, &[(0, 1.0)], 0), 0).unwrap(), BidOutcome::Accepted);
        assert_eq!(c.submit_bid(&bid(0, 0, &[(1, 1.0)], 1), 0).unwrap(), BidOutcome::RejectedDuplicate);
        assert_eq!(
            c.submit_bid(&bid(1, 3, &[(1, 1.0)], 2), 0),
            Err(ContractError::StaleRound { current: 0, requested: 3 })
        );
        assert!(matches!(c.submit_bid(&bid(1, 0, &[(1, 1.0), (1, 2.0)], 3), 0), Err(ContractError::InvalidBid(_))));
        assert!(matches!(c.submit_bid(&bid(1, 0, &[(9, 1.0)], 3), 0), Err(ContractError::ChunkIndex { .. })));
        assert!(matches!(c.submit_bid(&bid(1, 0, &[(1, f64::NAN)], 3), 0), Err(ContractError::InvalidBid(_))));
        assert_eq!(c.registered_agents().len(), 1);
    }

    #[test]
    fn winners() {
        let mut c = contract(4, 3);
        assert!(matches!(c.resolve_chunk_winners(), Err(ContractError::WrongPhase { .. })));
        c.submit_bid(&bid(1, 0, &[(3, 2.0), (0, 1.5)], 7), 0).unwrap();
        c.submit_bid(&bid(2, 0, &[(3, 5.0), (0, 1.5)], 9), 0).unwrap();
        c.submit_bid(&bid(3, 0, &[(1, 0.1)], 11), 0).unwrap();
        let w = c.resolve_chunk_winners().unwrap();
        assert_eq!(w.get(&3), Some(&AgentId(2)));
        assert_eq!(w.get(&0), Some(&AgentId(1)), "tie goes to the earlier arrival");
        assert_eq!(w.get(&1), Some(&AgentId(3)));
        assert_eq!(w.get(&2), None);
    }

    #[test]
    fn pushes() {
        let mut c = contract(2, 2);
        c.submit_bid(&bid(0, 0, &[(0, 2.0)], 0), 0).unwrap();
        c.submit_bid(&bid(1, 0, &[(0, 1.0), (1, 1.0)], 1), 5).unwrap();
        let good = payload(&[1.0, 2.0]);
        assert_eq!(c.push_chunk(AgentId(1), 0, &good, 6).unwrap(), PushOutcome::RejectedNotWinner);
        assert_eq!(c.push_chunk(AgentId(0), 0, &good, 6).unwrap(), PushOutcome::Stored);
        assert_eq!(c.push_chunk(AgentId(0), 0, &good, 7).unwrap(), PushOutcome::RejectedDuplicate);
        assert_eq!(c.push_chunk(AgentId(1), 1, &payload(&[1.0]), 7).unwrap(), PushOutcome::RejectedMalformed);
        assert_eq!(c.push_chunk(AgentId(1), 1, &vec![0; 25_000], 7).unwrap(), PushOutcome::RejectedSize);
        assert_eq!(c.push_chunk(AgentId(9), 1, &good, 7), Err(ContractError::Unauthorized(AgentId(9))));
        let r = c.read_chunk(0).unwrap();
        assert_eq!((r.payload, r.last_updated_round, r.last_updater), (&good[..], 0, Some(AgentId(0))));
        assert_eq!(c.chunk_cores()[0].last_updated_time, 6);
        assert_eq!(c.signal_close(AgentId(0), 8).unwrap(), SignalOutcome::Acknowledged);
        assert_eq!(c.signal_close(AgentId(0), 8).unwrap(), SignalOutcome::Acknowledged);
        assert_eq!(c.signal_close(AgentId(1), 9).unwrap(), SignalOutcome::RoundClosed);
        assert!(c.chunk_cores().iter().all(|core| core.current_bids.is_empty()));
        // The stored value survives the close.
        assert_eq!(c.read_chunk(0).unwrap().payload, &good[..]);
        assert!(matches!(c.read_chunk(2), Err(ContractError::ChunkIndex { .. })));
    }

    #[test]
    fn timeout_forfeits() {
        let mut c = contract(1, 1);
        c.submit_bid(&bid(0, 0, &[(0, 1.0)], 0), 100).unwrap();
        assert!(!c.poll_timeout(10_099));
        assert!(c.poll_timeout(10_100));
        assert_eq!((c.round(), c.phase(), c.timeouts()), (1, Phase::AcceptingBids, 1));
        assert_eq!(c.read_chunk(0).unwrap().last_updater, None);
    }

    #[test]
    fn history_is_monotone() {
        let mut c = contract(1, 1);
        for k in 0..3 {
            c.submit_bid(&bid(0, k, &[(0, 1.0)], k), k * 10).unwrap();
            c.signal_close(AgentId(0), k * 10 + 1).unwrap();
        }
        let phases: Vec<_> = c.history().iter().map(|h| (h.round, h.phase)).collect();
        assert_eq!(phases[..4], [(0, Phase::AcceptingBids), (0, Phase::Pushing), (0, Phase::Closed), (1, Phase::AcceptingBids)]);
    }

    #[test]
    fn transactions_through_ledger() {
        let c = contract(2, 1);
        let mut ledger = Ledger::new(c, LedgerConfig::default());
        let tx = Transaction::new(AgentId(0), TxKind::Bid, wire::encode_bid(0, &[(0, 1.0), (1, 0.5)]), 0);
        let done = ledger.submit(tx).unwrap();
        assert_eq!(done.outcome, Ok(TxEffect::Bid(BidOutcome::Accepted)));
        // 24 body bytes of bid entries occupy one storage word.
        assert_eq!(done.receipt.storage_words_written, 1);
        let push = wire::encode_push(0, 1, &payload(&[3.0, 4.0]));
        let done = ledger.submit(Transaction::new(AgentId(0), TxKind::Push, push, 0)).unwrap();
        assert_eq!(done.outcome, Ok(TxEffect::Push(PushOutcome::Stored)));
        let stale = Transaction::new(AgentId(0), TxKind::Signal, wire::encode_signal(5), 0);
        assert!(matches!(ledger.submit(stale).unwrap().outcome, Err(ContractError::StaleRound { .. })));
        let done = ledger.submit(Transaction::new(AgentId(0), TxKind::Signal, wire::encode_signal(0), 0)).unwrap();
        assert_eq!(done.outcome, Ok(TxEffect::Signal(SignalOutcome::RoundClosed)));
        assert_eq!(ledger.machine().global_model().unwrap().as_slice(), &[0.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn identical_sequences_identical_state() {
        let run = || {
            let mut c = contract(3, 2);
            c.submit_bid(&bid(0, 0, &[(0, 1.0), (2, 3.0)], 0), 0).unwrap();
            c.submit_bid(&bid(1, 0, &[(0, 1.0)], 1), 1).unwrap();
            c.push_chunk(AgentId(0), 0, &payload(&[5.0, 6.0]), 2).unwrap();
            c
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        let mut c = run();
        c.signal_close(AgentId(0), 3).unwrap();
        assert_ne!(a.digest(), c.digest());
    }
}
