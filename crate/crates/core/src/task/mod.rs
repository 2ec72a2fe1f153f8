//! Taxi repositioning as batch reinforcement learning on a grid city.

pub mod asr;
pub mod grid;
pub mod qnet;
pub mod rides;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{LocalTrainer, TrainError, TrainStats};
use crate::params::ParamVector;
use crate::seed::{self, StreamRng};
pub use asr::{asr_evaluate, Benchmark, NoLearning, Policy, QPolicy, RideBook};
pub use grid::{CityGrid, State};
pub use qnet::{bellman_update, train_step, QNet, Target, TrainConfig};
pub use rides::{generate_rides, generate_test_rides, ingest_rides_csv, DemandConfig, DemandModel, RideRecord};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TaskError {
    #[error("invalid task configuration: {0}")]
    Config(String),
    #[error("ride file format: {0}")]
    Format(String),
    #[error("ride file line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("benchmark: {0}")]
    Benchmark(String),
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NfqConfig {
    pub hidden: usize,
    pub gamma: f64,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for NfqConfig {
    fn default() -> Self {
        Self { hidden: 64, gamma: 0.8, train: TrainConfig::default() }
    }
}

/// The shared learning problem: city, demand and network shape.
#[derive(Debug, Clone)]
pub struct TaxiTask {
    pub grid: CityGrid,
    pub demand: Arc<DemandModel>,
    pub net: QNet,
    pub nfq: NfqConfig,
    pub rides_per_round: usize,
    pub seed: u64,
}

impl TaxiTask {
    pub fn new(
        grid: CityGrid,
        demand: DemandConfig,
        nfq: NfqConfig,
        rides_per_round: usize,
        seed: u64,
    ) -> Result<Self, TaskError> {
        if !(0.0..1.0).contains(&nfq.gamma) {
            return Err(TaskError::Config(format!("discount {} outside [0, 1)", nfq.gamma)));
        }
        let demand = Arc::new(DemandModel::new(grid, demand, seed)?);
        Ok(Self { grid, net: QNet::new(&grid, nfq.hidden), demand, nfq, rides_per_round, seed })
    }

    pub fn initial_model(&self) -> ParamVector {
        self.net.init(self.seed)
    }

    /// Rides seen by `stream` in round `k`.
    pub fn rides(&self, stream: u64, k: u64) -> Vec<RideRecord> {
        generate_rides(&self.demand, self.rides_per_round, stream, k, self.seed)
    }

    /// Trainer observing the union of the given ride streams each round.
    pub fn trainer(&self, streams: Vec<u64>) -> NfqTrainer {
        let label = streams.first().copied().unwrap_or(u64::MAX);
        NfqTrainer {
            task: self.clone(),
            rng: seed::stream(self.seed, &[seed::tag::TRAINER, label, streams.len() as u64]),
            streams,
        }
    }
}

/// Fitted-Q learner: per round, observe fresh rides, compute Bellman targets
/// with the current model, then fit.
pub struct NfqTrainer {
    task: TaxiTask,
    streams: Vec<u64>,
    rng: StreamRng,
}

impl NfqTrainer {
    pub fn streams(&self) -> &[u64] {
        &self.streams
    }
}

impl LocalTrainer for NfqTrainer {
    fn train(&mut self, iteration: u64, model: &mut [f32]) -> Result<TrainStats, TrainError> {
        let t = &self.task;
        let rides: Vec<RideRecord> = self.streams.iter().flat_map(|&s| t.rides(s, iteration)).collect();
        let targets = bellman_update(&t.net, model, &rides, t.nfq.gamma);
        train_step(&t.net, model, &targets, &t.nfq.train, &mut self.rng, iteration)
    }
}
