//! Reference learners: aggregator-driven FL, local learning, a single
//! centralized learner, and uncoordinated random chunk pushing.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::fleet::run_workers;
use crate::agent::{Agent, AgentError, LocalTrainer, RoundOutcome, Schedule, TrainError, TrainStats};
use crate::contract::wire;
use crate::ledger::{storage_words, AgentId, Applied, Ledger, StateMachine, Tick, Transaction, TxKind};
use crate::params::{deserialize_chunk, encode_slice, ParamError, ParamVector, PartitionScheme, BYTES_PER_PARAM};
use crate::seed::{self, StreamRng};
use crate::task::TaxiTask;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BaselineError {
    #[error("invalid baseline configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

/// Elementwise arithmetic mean, accumulated in f64.
pub fn mean_models(models: &[ParamVector]) -> Result<ParamVector, BaselineError> {
    let first = models.first().ok_or_else(|| BaselineError::Config("mean of no models".into()))?;
    let mut acc = vec![0.0f64; first.len()];
    for m in models {
        if m.len() != acc.len() {
            return Err(ParamError::LengthMismatch { expected: acc.len(), actual: m.len() }.into());
        }
        for (a, &w) in acc.iter_mut().zip(m.as_slice()) {
            *a += f64::from(w);
        }
    }
    let n = models.len() as f64;
    Ok(ParamVector::new(acc.into_iter().map(|a| (a / n) as f32).collect())?)
}

/// Central aggregator for classical federated averaging.
pub struct CflAggregator {
    global: ParamVector,
    round: u64,
    participants: usize,
    rng: StreamRng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CflRound {
    pub round: u64,
    pub selected: Vec<usize>,
    pub mean_loss: f64,
    pub train_steps: u64,
}

impl CflAggregator {
    pub fn new(initial: ParamVector, participants: usize, seed: u64) -> Result<Self, BaselineError> {
        if participants == 0 {
            return Err(BaselineError::Config("at least one participant per round".into()));
        }
        Ok(Self { global: initial, round: 0, participants, rng: seed::stream(seed, &[seed::tag::CFL_SELECT]) })
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    /// Select `L` trainers uniformly without replacement; each trains a copy
    /// of the global model; the new global is their mean.
    pub fn cfl_round(&mut self, trainers: &mut [Box<dyn LocalTrainer>]) -> Result<CflRound, BaselineError> {
        if trainers.len() < self.participants {
            return Err(BaselineError::Config(format!(
                "{} participants requested from {} agents",
                self.participants,
                trainers.len()
            )));
        }
        let mut selected = sample(&mut self.rng, trainers.len(), self.participants).into_vec();
        selected.sort_unstable();
        let mut models = Vec::with_capacity(selected.len());
        let (mut loss, mut steps) = (0.0, 0);
        for &j in &selected {
            let mut local = self.global.clone();
            let stats = trainers[j].train(self.round, local.as_mut_slice())?;
            local.check_finite()?;
            loss += stats.loss;
            steps += stats.steps;
            models.push(local);
        }
        self.global = mean_models(&models)?;
        let out = CflRound { round: self.round, mean_loss: loss / selected.len() as f64, train_steps: steps, selected };
        self.round += 1;
        Ok(out)
    }
}

/// A single learner training only on its own data, no averaging.
pub fn ll_train(
    trainer: &mut dyn LocalTrainer,
    initial: ParamVector,
    rounds: u64,
) -> Result<(ParamVector, Vec<TrainStats>), BaselineError> {
    let mut model = initial;
    let mut stats = Vec::with_capacity(rounds as usize);
    for k in 0..rounds {
        stats.push(trainer.train(k, model.as_mut_slice())?);
        model.check_finite()?;
    }
    Ok((model, stats))
}

/// One learner observing every listed ride stream.
pub fn centralized_nfq(task: &TaxiTask, streams: Vec<u64>, rounds: u64) -> Result<ParamVector, BaselineError> {
    let mut trainer = task.trainer(streams);
    Ok(ll_train(&mut trainer, task.initial_model(), rounds)?.0)
}

/// Shared chunk store with no bidding and no participation gate: every push
/// is stored, last write wins.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkStore {
    scheme: PartitionScheme,
    chunks: Vec<Vec<u8>>,
    unread: Vec<bool>,
    writes: u64,
    wasted: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreWrite {
    pub chunk: usize,
    /// The write replaced a value nobody had pulled.
    pub overwrote_unread: bool,
}

impl ChunkStore {
    pub fn new(scheme: PartitionScheme, initial: &ParamVector) -> Result<Self, BaselineError> {
        if initial.len() != scheme.total_params() {
            return Err(ParamError::LengthMismatch { expected: scheme.total_params(), actual: initial.len() }.into());
        }
        let chunks = (0..scheme.chunk_count())
            .map(|c| encode_slice(&initial.as_slice()[scheme.range(c)?]))
            .collect::<Result<Vec<_>, _>>()?;
        let unread = vec![false; chunks.len()];
        Ok(Self { scheme, chunks, unread, writes: 0, wasted: 0 })
    }

    pub fn scheme(&self) -> &PartitionScheme {
        &self.scheme
    }

    pub fn global_model(&self) -> Result<ParamVector, BaselineError> {
        let mut v = Vec::with_capacity(self.scheme.total_params());
        for c in &self.chunks {
            v.extend(deserialize_chunk(c)?);
        }
        Ok(ParamVector::new(v)?)
    }

    /// Record that an agent pulled every chunk.
    pub fn mark_read(&mut self) {
        self.unread.fill(false);
    }

    pub fn writes(&self) -> u64 {
        self.writes
    }

    pub fn wasted(&self) -> u64 {
        self.wasted
    }

    fn write(&mut self, payload: &[u8]) -> Result<StoreWrite, String> {
        let (_, chunk, body) = wire::decode_push(payload).map_err(|e| e.to_string())?;
        let chunk = chunk as usize;
        let len = self.scheme.chunk_len(chunk).map_err(|e| e.to_string())?;
        if body.len() != len * BYTES_PER_PARAM || deserialize_chunk(body).map_or(true, |v| v.iter().any(|w| !w.is_finite())) {
            return Err(format!("malformed payload for chunk {chunk}"));
        }
        let overwrote_unread = self.unread[chunk];
        self.chunks[chunk] = body.to_vec();
        self.unread[chunk] = true;
        self.writes += 1;
        self.wasted += u64::from(overwrote_unread);
        Ok(StoreWrite { chunk, overwrote_unread })
    }
}

impl StateMachine for ChunkStore {
    type Outcome = Result<StoreWrite, String>;

    fn apply(&mut self, tx: &Transaction) -> Applied<Self::Outcome> {
        if tx.kind != TxKind::Push {
            return Applied { outcome: Err(format!("store accepts pushes only, got {}", tx.kind)), storage_words: 0 };
        }
        let outcome = self.write(&tx.payload);
        let storage_words = if outcome.is_ok() { storage_words(tx.body_len()) } else { 0 };
        Applied { outcome, storage_words }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DflRound {
    pub round: u64,
    pub outcomes: Vec<RoundOutcome>,
    pub gas: u64,
    pub push_ticks: Tick,
    pub writes: u64,
    pub wasted: u64,
}

/// Agents that pull, average, train and push `B` random chunks every round.
pub struct RandomDflFleet {
    agents: Vec<Agent>,
    ledger: Ledger<ChunkStore>,
    schedule: Schedule,
    round: u64,
}

impl RandomDflFleet {
    pub fn new(agents: Vec<Agent>, ledger: Ledger<ChunkStore>, schedule: Schedule) -> Result<Self, BaselineError> {
        let chunks = ledger.machine().scheme().chunk_count();
        if let Some(a) = agents.iter().find(|a| a.budget() > chunks) {
            return Err(BaselineError::Config(format!("budget {} exceeds chunk count {chunks}", a.budget())));
        }
        Ok(Self { agents, ledger, schedule, round: 0 })
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn ledger(&self) -> &Ledger<ChunkStore> {
        &self.ledger
    }

    pub fn step(&mut self) -> Result<DflRound, BaselineError> {
        let t0 = self.ledger.now();
        let round = self.round;
        let store = self.ledger.machine();
        let global = store.global_model()?;
        let scheme = store.scheme().clone();
        let before = (store.writes(), store.wasted());
        self.ledger.machine_mut().mark_read();
        let work = |a: &mut Agent| -> Result<(TrainStats, Vec<Transaction>), AgentError> {
            let p = a.prepare(&global, t0)?;
            let ids = a.select_chunks(scheme.chunk_count())?;
            let txs = ids.into_iter().map(|c| a.push_tx(&scheme, round, c, p.ready_time)).collect::<Result<_, _>>()?;
            Ok((p.stats, txs))
        };
        let results = match self.schedule {
            Schedule::Lockstep => self.agents.iter_mut().map(work).collect::<Vec<_>>(),
            Schedule::Threaded { workers } => run_workers(&mut self.agents, workers, work),
        };
        let mut outcomes: Vec<RoundOutcome> = self
            .agents
            .iter()
            .map(|a| RoundOutcome { round, agent: a.id().0, ..RoundOutcome::default() })
            .collect();
        let index: std::collections::HashMap<AgentId, usize> =
            self.agents.iter().enumerate().map(|(i, a)| (a.id(), i)).collect();
        let mut batch = Vec::new();
        for (out, r) in outcomes.iter_mut().zip(results) {
            let (stats, txs) = r?;
            out.training_loss = stats.loss;
            out.train_steps = stats.steps;
            out.wins = txs.len();
            batch.extend(txs);
        }
        for tx in self.ledger.order_concurrent(batch) {
            let sender = tx.sender;
            if let Err(e) = self.ledger.enqueue(tx) {
                outcomes[index[&sender]].errors.push(e.to_string());
            }
        }
        for c in self.ledger.flush() {
            let out = &mut outcomes[index[&c.tx.sender]];
            out.gas += c.receipt.gas_used;
            out.push_ticks += c.tx.commit_time - c.tx.submit_time;
            match c.outcome {
                Ok(_) => out.pushes += 1,
                Err(e) => out.errors.push(e),
            }
        }
        let receipts = self.ledger.take_receipts();
        let store = self.ledger.machine();
        self.round += 1;
        Ok(DflRound {
            round,
            gas: receipts.iter().map(|r| r.gas).sum(),
            push_ticks: outcomes.iter().map(|o| o.push_ticks).sum(),
            writes: store.writes() - before.0,
            wasted: store.wasted() - before.1,
            outcomes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::NoiseTrainer;
    use crate::ledger::LedgerConfig;
    use crate::params::build_partition;

    struct AddOne;
    impl LocalTrainer for AddOne {
        fn train(&mut self, _: u64, m: &mut [f32]) -> Result<TrainStats, TrainError> {
            m.iter_mut().for_each(|w| *w += 1.0);
            Ok(TrainStats { loss: 0.5, steps: 1 })
        }
    }

    struct SetTo(f32);
    impl LocalTrainer for SetTo {
        fn train(&mut self, _: u64, m: &mut [f32]) -> Result<TrainStats, TrainError> {
            m.fill(self.0);
            Ok(TrainStats::default())
        }
    }

    #[test]
    fn mean_of_models() {
        let a = ParamVector::new(vec![0.0, 0.0]).unwrap();
        let b = ParamVector::new(vec![2.0, 2.0]).unwrap();
        assert_eq!(mean_models(&[a, b.clone()]).unwrap().as_slice(), &[1.0, 1.0]);
        assert_eq!(mean_models(&[b.clone(), b.clone(), b.clone()]).unwrap(), b);
        assert!(mean_models(&[]).is_err());
    }

    #[test]
    fn cfl_averages_selected() {
        let mut trainers: Vec<Box<dyn LocalTrainer>> = vec![Box::new(SetTo(0.0)), Box::new(SetTo(2.0))];
        let mut agg = CflAggregator::new(ParamVector::zeros(3).unwrap(), 2, 0).unwrap();
        let r = agg.cfl_round(&mut trainers).unwrap();
        assert_eq!(r.selected, vec![0, 1]);
        assert_eq!(agg.global().as_slice(), &[1.0; 3]);
        let mut agg = CflAggregator::new(ParamVector::zeros(3).unwrap(), 3, 0).unwrap();
        assert!(matches!(agg.cfl_round(&mut trainers), Err(BaselineError::Config(_))));
    }

    #[test]
    fn cfl_selection_is_uniform() {
        let mut trainers: Vec<Box<dyn LocalTrainer>> = (0..5).map(|_| Box::new(AddOne) as Box<dyn LocalTrainer>).collect();
        let mut agg = CflAggregator::new(ParamVector::zeros(1).unwrap(), 2, 9).unwrap();
        let mut counts = [0usize; 5];
        for _ in 0..5_000 {
            agg.cfl_round(&mut trainers).unwrap().selected.iter().for_each(|&j| counts[j] += 1);
        }
        for c in counts {
            assert!((c as f64 / 5_000.0 - 0.4).abs() < 0.03, "{counts:?}");
        }
    }

    #[test]
    fn single_agent_cfl_is_local_learning() {
        let mut trainers: Vec<Box<dyn LocalTrainer>> = vec![Box::new(AddOne)];
        let mut agg = CflAggregator::new(ParamVector::zeros(2).unwrap(), 1, 0).unwrap();
        for _ in 0..4 {
            agg.cfl_round(&mut trainers).unwrap();
        }
        let (ll, stats) = ll_train(&mut AddOne, ParamVector::zeros(2).unwrap(), 4).unwrap();
        assert_eq!(agg.global(), &ll);
        assert_eq!(stats.len(), 4);
        assert_eq!(ll_train(&mut AddOne, ll.clone(), 0).unwrap().0, ll);
    }

    fn dfl(n: u32, chunks: usize, budget: usize) -> RandomDflFleet {
        let scheme = build_partition(chunks * 2, 8).unwrap();
        let init = ParamVector::zeros(chunks * 2).unwrap();
        let store = ChunkStore::new(scheme, &init).unwrap();
        let agents = (0..n)
            .map(|i| {
                Agent::new(AgentId(i), init.clone(), budget, 1, Box::new(NoiseTrainer::new(u64::from(i), 1.0))).unwrap()
            })
            .collect();
        RandomDflFleet::new(agents, Ledger::new(store, LedgerConfig::default()), Schedule::Lockstep).unwrap()
    }

    #[test]
    fn wasted_updates() {
        let mut one = dfl(1, 4, 2);
        for _ in 0..10 {
            let r = one.step().unwrap();
            assert_eq!((r.writes, r.wasted), (2, 0));
        }
        let mut two = dfl(2, 1, 1);
        for _ in 0..10 {
            let r = two.step().unwrap();
            assert_eq!((r.writes, r.wasted), (2, 1));
        }
    }

    #[test]
    fn wasted_matches_occupancy() {
        let (n, c, b) = (64u32, 88usize, 16usize);
        let mut f = dfl(n, c, b);
        let rounds = 200;
        let total: u64 = (0..rounds).map(|_| f.step().unwrap().wasted).sum();
        // Overwrites = writes − distinct chunks written.
        let p = b as f64 / c as f64;
        let expected = f64::from(n) * b as f64 - c as f64 * (1.0 - (1.0 - p).powi(n as i32));
        let mean = total as f64 / f64::from(rounds);
        assert!((mean - expected).abs() / expected < 0.01, "{mean} vs {expected}");
    }

    #[test]
    fn schedules_agree() {
        let run = |schedule| {
            let mut f = dfl(6, 5, 2);
            f.schedule = schedule;
            let rounds: Vec<_> = (0..5).map(|_| f.step().unwrap()).collect();
            (rounds, f.ledger().machine().global_model().unwrap())
        };
        assert_eq!(run(Schedule::Lockstep), run(Schedule::Threaded { workers: 3 }));
    }
}
