//! Simulated ledger: a single serialization point that totally orders
//! transactions, enforces the payload limit, charges gas and stamps commit
//! times in integer ticks.
//!
//! Transactions are queued with [`Ledger::enqueue`] and become visible to
//! readers once the clock passes their commit time ([`Ledger::advance_to`]).
//! Commit times are nondecreasing in sequence order, so the state a reader
//! sees at time `t` is always a prefix of the total order.

use std::collections::{BTreeMap, VecDeque};
use std::io;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::MAX_TX_PAYLOAD_BYTES;

/// Simulated time.
pub type Tick = u64;

/// Every transaction carries an 8-byte header ahead of its body. The payload
/// limit applies to the body.
pub const TX_HEADER_BYTES: usize = 8;

pub const STORAGE_WORD_BYTES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AgentId(pub u32);

impl std::fmt::Display for AgentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "A{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TxKind {
    Register,
    Bid,
    Push,
    Signal,
}

impl std::fmt::Display for TxKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TxKind::Register => "register",
            TxKind::Bid => "bid",
            TxKind::Push => "push",
            TxKind::Signal => "signal",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub sender: AgentId,
    pub kind: TxKind,
    /// Per-sender counter; orders several transactions a sender submits at the same tick.
    pub nonce: u64,
    pub payload: Vec<u8>,
    pub submit_time: Tick,
    /// Assigned by the ledger.
    pub commit_time: Tick,
    /// Assigned by the ledger.
    pub seq: u64,
}

impl Transaction {
    pub fn new(sender: AgentId, kind: TxKind, payload: Vec<u8>, submit_time: Tick) -> Self {
        Self { sender, kind, nonce: 0, payload, submit_time, commit_time: 0, seq: 0 }
    }

    pub fn with_nonce(mut self, nonce: u64) -> Self {
        self.nonce = nonce;
        self
    }

    pub fn body_len(&self) -> usize {
        self.payload.len().saturating_sub(TX_HEADER_BYTES)
    }
}

/// Ethereum-flavoured parametric gas schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GasModel {
    pub base_tx_gas: u64,
    pub gas_per_nonzero_byte: u64,
    pub gas_per_zero_byte: u64,
    /// Per 32-byte storage word written.
    pub gas_per_storage_word: u64,
}

impl Default for GasModel {
    fn default() -> Self {
        Self { base_tx_gas: 21_000, gas_per_nonzero_byte: 16, gas_per_zero_byte: 4, gas_per_storage_word: 5_000 }
    }
}

impl GasModel {
    pub fn charge(&self, payload: &[u8], storage_words: u64) -> u64 {
        let nonzero = payload.iter().filter(|&&b| b != 0).count() as u64;
        let zero = payload.len() as u64 - nonzero;
        self.base_tx_gas
            + nonzero * self.gas_per_nonzero_byte
            + zero * self.gas_per_zero_byte
            + storage_words * self.gas_per_storage_word
    }
}

pub fn storage_words(bytes: usize) -> u64 {
    bytes.div_ceil(STORAGE_WORD_BYTES) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    pub fixed_consensus_ticks: Tick,
    pub per_byte_ticks: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self { fixed_consensus_ticks: 50, per_byte_ticks: 0.01 }
    }
}

impl LatencyModel {
    /// `fixed + floor(per_byte * bytes)`.
    pub fn commit_latency(&self, payload_bytes: usize) -> Tick {
        self.fixed_consensus_ticks + (self.per_byte_ticks * payload_bytes as f64).floor() as Tick
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GasReceipt {
    pub seq: u64,
    pub gas_used: u64,
    pub storage_words_written: u64,
}

/// One row of the receipt log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceiptRecord {
    pub seq: u64,
    pub sender: u32,
    pub kind: TxKind,
    pub bytes: usize,
    pub gas: u64,
    pub commit_time: Tick,
}

/// What a state machine reports back for one applied transaction.
#[derive(Debug, Clone, PartialEq)]
pub struct Applied<O> {
    pub outcome: O,
    pub storage_words: u64,
}

/// Anything the ledger can drive: transactions are applied strictly in
/// sequence order.
pub trait StateMachine {
    type Outcome: Clone + std::fmt::Debug;

    fn apply(&mut self, tx: &Transaction) -> Applied<Self::Outcome>;

    /// Called after the clock advances; used for deadline handling.
    fn on_tick(&mut self, _now: Tick) {}
}

#[derive(Debug, Clone, PartialEq)]
pub struct Committed<O> {
    pub tx: Transaction,
    pub receipt: GasReceipt,
    pub outcome: O,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("payload of {bytes} B exceeds the {limit} B transaction limit")]
    Oversize { bytes: usize, limit: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LedgerConfig {
    pub gas: GasModel,
    pub latency: LatencyModel,
    pub max_tx_payload_bytes: usize,
    pub tie_break_seed: u64,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        Self {
            gas: GasModel::default(),
            latency: LatencyModel::default(),
            max_tx_payload_bytes: MAX_TX_PAYLOAD_BYTES,
            tie_break_seed: 0,
        }
    }
}

pub struct Ledger<M: StateMachine> {
    machine: M,
    config: LedgerConfig,
    next_seq: u64,
    clock: Tick,
    last_commit: Tick,
    pending: VecDeque<Transaction>,
    log: Vec<ReceiptRecord>,
    gas_totals: BTreeMap<AgentId, u64>,
}

impl<M: StateMachine> Ledger<M> {
    pub fn new(machine: M, config: LedgerConfig) -> Self {
        Self { machine, config, next_seq: 0, clock: 0, last_commit: 0, pending: VecDeque::new(), log: Vec::new(), gas_totals: BTreeMap::new() }
    }

    pub fn config(&self) -> &LedgerConfig {
        &self.config
    }

    /// Committed state. Reads are free and never observe queued transactions.
    pub fn machine(&self) -> &M {
        &self.machine
    }

    /// Out-of-band access for free reads that only touch bookkeeping.
    pub fn machine_mut(&mut self) -> &mut M {
        &mut self.machine
    }

    pub fn now(&self) -> Tick {
        self.clock
    }

    /// Commit time assigned to the most recently queued transaction.
    pub fn last_commit_time(&self) -> Tick {
        self.last_commit
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Receipts committed since the last [`Ledger::take_receipts`].
    pub fn receipts(&self) -> &[ReceiptRecord] {
        &self.log
    }

    /// Drain the receipt log. Per-sender gas totals are kept.
    pub fn take_receipts(&mut self) -> Vec<ReceiptRecord> {
        std::mem::take(&mut self.log)
    }

    pub fn commit_latency(&self, payload_bytes: usize) -> Tick {
        self.config.latency.commit_latency(payload_bytes)
    }

    /// Assign the next sequence number and commit time. Oversize payloads are
    /// rejected here, before ordering, and cost nothing.
    pub fn enqueue(&mut self, mut tx: Transaction) -> Result<u64, LedgerError> {
        let limit = self.config.max_tx_payload_bytes;
        if tx.body_len() > limit {
            return Err(LedgerError::Oversize { bytes: tx.body_len(), limit });
        }
        let commit = tx.submit_time.max(self.clock) + self.commit_latency(tx.payload.len());
        tx.commit_time = commit.max(self.last_commit);
        tx.seq = self.next_seq;
        self.next_seq += 1;
        self.last_commit = tx.commit_time;
        let seq = tx.seq;
        self.pending.push_back(tx);
        Ok(seq)
    }

    /// Commit every queued transaction with `commit_time <= t`, then let the
    /// state machine observe the new clock.
    pub fn advance_to(&mut self, t: Tick) -> Vec<Committed<M::Outcome>> {
        let mut done = Vec::new();
        while self.pending.front().is_some_and(|tx| tx.commit_time <= t) {
            let tx = self.pending.pop_front().expect("front checked");
            self.clock = self.clock.max(tx.commit_time);
            self.machine.on_tick(tx.commit_time);
            done.push(self.commit(tx));
        }
        self.clock = self.clock.max(t);
        self.machine.on_tick(self.clock);
        done
    }

    /// Commit everything queued.
    pub fn flush(&mut self) -> Vec<Committed<M::Outcome>> {
        let until = self.pending.back().map_or(self.clock, |tx| tx.commit_time);
        self.advance_to(until)
    }

    /// Queue `tx` and advance the clock to its commit time. Earlier queued
    /// transactions commit first and are logged; only `tx`'s record is returned.
    pub fn submit(&mut self, tx: Transaction) -> Result<Committed<M::Outcome>, LedgerError> {
        let seq = self.enqueue(tx)?;
        let commit = self.last_commit;
        let done = self.advance_to(commit);
        Ok(done.into_iter().find(|c| c.tx.seq == seq).expect("submitted tx commits by its own commit time"))
    }

    fn commit(&mut self, tx: Transaction) -> Committed<M::Outcome> {
        let Applied { outcome, storage_words } = self.machine.apply(&tx);
        let gas_used = self.config.gas.charge(&tx.payload, storage_words);
        *self.gas_totals.entry(tx.sender).or_insert(0) += gas_used;
        self.log.push(ReceiptRecord {
            seq: tx.seq,
            sender: tx.sender.0,
            kind: tx.kind,
            bytes: tx.payload.len(),
            gas: gas_used,
            commit_time: tx.commit_time,
        });
        let receipt = GasReceipt { seq: tx.seq, gas_used, storage_words_written: storage_words };
        Committed { tx, receipt, outcome }
    }

    /// Deterministic total order of concurrently submitted transactions:
    /// by submit time, then a seeded permutation of senders, then nonce.
    pub fn order_concurrent(&self, pending: Vec<Transaction>) -> Vec<Transaction> {
        order_concurrent(pending, self.config.tie_break_seed)
    }

    /// Cumulative gas per sender since genesis.
    pub fn gas_by_sender(&self) -> &BTreeMap<AgentId, u64> {
        &self.gas_totals
    }

    pub fn total_gas(&self) -> u64 {
        self.gas_totals.values().sum()
    }

    pub fn write_receipts_csv<W: io::Write>(&self, w: W) -> csv::Result<()> {
        write_receipts_csv(&self.log, w)
    }
}

pub fn write_receipts_csv<W: io::Write>(records: &[ReceiptRecord], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["seq", "sender", "kind", "bytes", "gas", "commit_time"])?;
    for r in records {
        out.write_record([
            r.seq.to_string(),
            r.sender.to_string(),
            r.kind.to_string(),
            r.bytes.to_string(),
            r.gas.to_string(),
            r.commit_time.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn order_concurrent(mut pending: Vec<Transaction>, seed: u64) -> Vec<Transaction> {
    pending.sort_by_key(|tx| (tx.submit_time, sender_rank(seed, tx.sender), tx.sender, tx.nonce));
    pending
}

use crate::seed::splitmix64;

fn sender_rank(seed: u64, sender: AgentId) -> u64 {
    splitmix64(seed ^ u64::from(sender.0).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Multi-producer submission queue. Producers push from any thread; the
/// driver drains and hands the batch to [`Ledger::order_concurrent`].
#[derive(Debug, Default)]
pub struct SubmissionQueue {
    inner: Mutex<Vec<Transaction>>,
}

impl SubmissionQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, tx: Transaction) {
        self.inner.lock().expect("submission queue poisoned").push(tx);
    }

    pub fn drain(&self) -> Vec<Transaction> {
        std::mem::take(&mut *self.inner.lock().expect("submission queue poisoned"))
    }
}
