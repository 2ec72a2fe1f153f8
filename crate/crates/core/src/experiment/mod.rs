//! Configuration-driven experiment runner: benefit, chunk/budget
//! sensitivity, scalability, participation sweep and the learning-rate
//! equivalence check, all at desk scale.

pub mod report;
pub mod stats;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Agent, AgentError, Fleet, FleetConfig, LocalTrainer, ProtocolRound, RoundOutcome, Schedule, Timing};
use crate::baselines::{ll_train, BaselineError, ChunkStore, CflAggregator, RandomDflFleet};
use crate::contract::{ContractConfig, ContractError, SmartContract};
use crate::ledger::{AgentId, GasModel, LatencyModel, Ledger, LedgerConfig};
use crate::lemma::{equivalence_experiment, EquivalenceConfig, LemmaError, LemmaParams};
use crate::params::{build_partition, ParamError, ParamVector, PartitionScheme};
use crate::seed;
use crate::task::{asr_evaluate, generate_test_rides, Benchmark, CityGrid, DemandConfig, NfqConfig, NoLearning, QNet, QPolicy, RideBook, TaskError, TaxiTask};
pub use report::{emit_reports, AsrReport, CellSummary, MetricRow, MetricsBundle, Summary};
pub use stats::{mean_std, paired_t_greater, PairedTest, Stat};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Lemma(#[from] LemmaError),
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("report encoding: {0}")]
    Encode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    #[default]
    Benefit,
    Sensitivity,
    Scalability,
    PlSweep,
    Lemma,
}

impl Scenario {
    pub const ALL: [Scenario; 5] =
        [Scenario::Benefit, Scenario::Sensitivity, Scenario::Scalability, Scenario::PlSweep, Scenario::Lemma];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Benefit => "benefit",
            Scenario::Sensitivity => "sensitivity",
            Scenario::Scalability => "scalability",
            Scenario::PlSweep => "pl_sweep",
            Scenario::Lemma => "lemma",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown scenario {s:?}; expected one of benefit, sensitivity, scalability, pl_sweep, lemma"))
    }
}

/// Participation level, either as a share of the fleet or a head count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Participation {
    Fraction(f64),
    Count(usize),
}

impl Participation {
    pub fn resolve(self, n: usize) -> usize {
        match self {
            Participation::Fraction(f) => pl_to_count(f, n),
            Participation::Count(c) => c,
        }
    }
}

/// `max(1, ceil(fraction · n))`.
pub fn pl_to_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).ceil() as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridParams {
    pub side: usize,
    pub slots: usize,
}

impl Default for GridParams {
    fn default() -> Self {
        Self { side: 8, slots: crate::task::grid::DEFAULT_SLOTS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkParams {
    pub trajectories: usize,
    pub max_rides: usize,
    pub horizon_slots: usize,
    /// Independent benchmark draws averaged into one ASR value.
    pub repetitions: usize,
    /// Size of the held-out ride pool the trajectories consume.
    pub test_rides: usize,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        Self { trajectories: 50, max_rides: 50, horizon_slots: 96, repetitions: 3, test_rides: 3000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepParams {
    pub pl_levels: Vec<f64>,
    pub scalability_n: Vec<usize>,
    pub sensitivity_chunk_bytes: Vec<usize>,
    pub sensitivity_budgets: Vec<usize>,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            pl_levels: vec![0.05, 0.25, 0.5, 0.75],
            scalability_n: vec![16, 32, 64, 128],
            sensitivity_chunk_bytes: vec![2048, 4096, 8192, 16384],
            sensitivity_budgets: vec![16, 24, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub rounds: usize,
    pub rides_per_agent_per_round: usize,
    pub chunk_size_bytes: usize,
    pub budget: usize,
    pub participation: Participation,
    pub gas: GasModel,
    pub latency: LatencyModel,
    pub timing: Timing,
    /// Number of seeds; seed `i` is `seed + i`.
    pub seeds: usize,
    pub seed: u64,
    pub grid: GridParams,
    pub demand: DemandConfig,
    /// Network width lives in `nfq.hidden`.
    pub nfq: NfqConfig,
    pub benchmark: BenchmarkParams,
    /// Agents whose purely local models are averaged into the LL score.
    pub ll_agents: usize,
    /// Evaluate the shared model every this many rounds (0: final only).
    pub eval_every: usize,
    /// Worker threads for agent work; 1 runs in lockstep.
    pub workers: usize,
    pub sweep: SweepParams,
    pub lemma: EquivalenceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Benefit,
            n: 16,
            rounds: 50,
            rides_per_agent_per_round: 70,
            chunk_size_bytes: 2048,
            budget: 16,
            participation: Participation::Fraction(0.25),
            gas: GasModel::default(),
            latency: LatencyModel::default(),
            timing: Timing::default(),
            seeds: 5,
            seed: 0,
            grid: GridParams::default(),
            // Taxis work their own neighbourhood most of the time.
            demand: DemandConfig { home_share: 0.8, home_radius: 2, ..DemandConfig::default() },
            nfq: NfqConfig::default(),
            benchmark: BenchmarkParams::default(),
            ll_agents: 4,
            eval_every: 10,
            workers: 1,
            sweep: SweepParams::default(),
            lemma: EquivalenceConfig::default(),
        }
    }
}

/// One simulated setting within a scenario.
#[derive(Debug, Clone, PartialEq)]
struct CellSpec {
    label: String,
    n: usize,
    participation_level: usize,
    budget: usize,
    chunk_size_bytes: usize,
    baselines: bool,
    random_dfl: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Invalid(vec![format!("config: {e}")]))
    }

    pub fn param_count(&self) -> usize {
        let grid = CityGrid::new(self.grid.side.max(1), self.grid.slots.max(1)).expect("nonzero grid");
        QNet::new(&grid, self.nfq.hidden).param_count()
    }

    pub fn seed_values(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    fn schedule(&self) -> Schedule {
        if self.workers > 1 {
            Schedule::Threaded { workers: self.workers }
        } else {
            Schedule::Lockstep
        }
    }

    fn cells(&self) -> Vec<CellSpec> {
        let cell = |label: String, n: usize, l: usize, budget: usize, chunk: usize| CellSpec {
            label,
            n,
            participation_level: l,
            budget,
            chunk_size_bytes: chunk,
            baselines: false,
            random_dfl: false,
        };
        let l = self.participation.resolve(self.n);
        match self.scenario {
            Scenario::Benefit => {
                vec![CellSpec { baselines: true, ..cell("benefit".into(), self.n, l, self.budget, self.chunk_size_bytes) }]
            }
            Scenario::Sensitivity => {
                let mut out = Vec::new();
                for &chunk in &self.sweep.sensitivity_chunk_bytes {
                    for &b in &self.sweep.sensitivity_budgets {
                        out.push(cell(format!("chunk={chunk},budget={b}"), self.n, l, b, chunk));
                    }
                }
                out
            }
            Scenario::Scalability => self
                .sweep
                .scalability_n
                .iter()
                .map(|&n| cell(format!("n={n}"), n, self.participation.resolve(n), self.budget, self.chunk_size_bytes))
                .collect(),
            Scenario::PlSweep => {
                let mut out: Vec<CellSpec> = self
                    .sweep
                    .pl_levels
                    .iter()
                    .map(|&f| cell(format!("pl={f}"), self.n, pl_to_count(f, self.n), self.budget, self.chunk_size_bytes))
                    .collect();
                out.push(CellSpec { random_dfl: true, ..cell("random_dfl".into(), self.n, 0, self.budget, self.chunk_size_bytes) });
                out
            }
            Scenario::Lemma => Vec::new(),
        }
    }

    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let mut v = Vec::new();
        let mut positive = |name: &str, x: usize| {
            if x == 0 {
                v.push(format!("{name} must be positive"));
            }
        };
        positive("n", self.n);
        positive("rounds", self.rounds);
        positive("rides_per_agent_per_round", self.rides_per_agent_per_round);
        positive("chunk_size_bytes", self.chunk_size_bytes);
        positive("budget", self.budget);
        positive("seeds", self.seeds);
        positive("grid.side", self.grid.side);
        positive("grid.slots", self.grid.slots);
        positive("nfq.hidden", self.nfq.hidden);
        positive("nfq.epochs", self.nfq.train.epochs);
        positive("nfq.batch_size", self.nfq.train.batch_size);
        positive("benchmark.trajectories", self.benchmark.trajectories);
        positive("benchmark.max_rides", self.benchmark.max_rides);
        positive("benchmark.horizon_slots", self.benchmark.horizon_slots);
        positive("benchmark.repetitions", self.benchmark.repetitions);
        positive("benchmark.test_rides", self.benchmark.test_rides);
        positive("ll_agents", self.ll_agents);
        positive("workers", self.workers);
        match self.participation {
            Participation::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                v.push(format!("participation fraction {f} outside (0, 1]"))
            }
            Participation::Count(c) if c == 0 || c > self.n => {
                v.push(format!("participation count {c} outside 1..={}", self.n))
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.nfq.gamma) {
            v.push(format!("nfq.gamma {} outside [0, 1)", self.nfq.gamma));
        }
        if !(self.nfq.train.learning_rate > 0.0 && self.nfq.train.learning_rate.is_finite()) {
            v.push(format!("nfq.learning_rate {} must be positive", self.nfq.train.learning_rate));
        }
        if !self.latency.per_byte_ticks.is_finite() || self.latency.per_byte_ticks < 0.0 {
            v.push(format!("latency.per_byte_ticks {} must be nonnegative", self.latency.per_byte_ticks));
        }
        match self.scenario {
            Scenario::PlSweep => {
                if self.sweep.pl_levels.is_empty() {
                    v.push("sweep.pl_levels is empty".into());
                }
                for f in &self.sweep.pl_levels {
                    if !(*f > 0.0 && *f <= 1.0) {
                        v.push(format!("sweep.pl_levels entry {f} outside (0, 1]"));
                    }
                }
            }
            Scenario::Scalability => {
                if self.sweep.scalability_n.is_empty() {
                    v.push("sweep.scalability_n is empty".into());
                }
                if self.sweep.scalability_n.contains(&0) {
                    v.push("sweep.scalability_n entries must be positive".into());
                }
                if let Participation::Count(c) = self.participation {
                    for &n in self.sweep.scalability_n.iter().filter(|&&n| n < c) {
                        v.push(format!("participation count {c} exceeds fleet size {n}"));
                    }
                }
            }
            Scenario::Sensitivity => {
                if self.sweep.sensitivity_chunk_bytes.is_empty() || self.sweep.sensitivity_budgets.is_empty() {
                    v.push("sensitivity sweep needs chunk sizes and budgets".into());
                }
                if self.sweep.sensitivity_budgets.contains(&0) {
                    v.push("sweep.sensitivity_budgets entries must be positive".into());
                }
            }
            Scenario::Lemma => {
                let l = &self.lemma;
                let p = LemmaParams {
                    n: l.n as u64,
                    chunks: l.chunks as u64,
                    budget: l.budget as u64,
                    participants: l.participants as u64,
                    alpha_fl: l.alpha_fl,
                    alpha_bfl: l.alpha_bfl,
                    eta_fl: l.eta_fl,
                };
                if let Err(e) = p.validate() {
                    v.push(format!("lemma: {e}"));
                }
                if l.rounds == 0 || l.seeds == 0 || l.params_per_chunk == 0 {
                    v.push("lemma rounds, seeds and params_per_chunk must be positive".into());
                }
            }
            Scenario::Benefit => {}
        }
        if self.scenario != Scenario::Lemma && self.grid.side > 0 && self.grid.slots > 0 && self.nfq.hidden > 0 {
            let params = self.param_count();
            for c in self.cells() {
                match build_partition(params, c.chunk_size_bytes) {
                    Err(e) => v.push(format!("{}: chunk size {}: {e}", c.label, c.chunk_size_bytes)),
                    Ok(s) if c.budget > s.chunk_count() => v.push(format!(
                        "{}: budget {} exceeds the {} chunks of a {}-parameter model (widen nfq.hidden or shrink chunks)",
                        c.label,
                        c.budget,
                        s.chunk_count(),
                        params
                    )),
                    Ok(_) => {}
                }
                if !c.random_dfl && (c.participation_level == 0 || c.participation_level > c.n) {
                    v.push(format!("{}: participation level {} outside 1..={}", c.label, c.participation_level, c.n));
                }
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(ExperimentError::Invalid(v))
        }
    }
}

/// Everything one (cell, seed) run produces.
struct SeedRun {
    rows: Vec<MetricRow>,
    scalars: BTreeMap<String, f64>,
    asr: BTreeMap<&'static str, f64>,
}

impl SeedRun {
    fn new() -> Self {
        Self { rows: Vec::new(), scalars: BTreeMap::new(), asr: BTreeMap::new() }
    }
}

struct Evaluator {
    grid: CityGrid,
    net: QNet,
    book: RideBook,
    benchmarks: Vec<Benchmark>,
}

impl Evaluator {
    fn new(cfg: &ExperimentConfig, task: &TaxiTask, seed: u64) -> Result<Self, TaskError> {
        let b = &cfg.benchmark;
        let test = generate_test_rides(&task.demand, b.test_rides, seed);
        let benchmarks = (0..b.repetitions as u64)
            .map(|r| Benchmark::sample(&test, b.trajectories, b.max_rides, b.horizon_slots, seed, r))
            .collect::<Result<_, _>>()?;
        Ok(Self { grid: task.grid, net: task.net, book: RideBook::new(&task.grid, test)?, benchmarks })
    }

    fn no_learning(&self) -> Result<f64, TaskError> {
        asr_evaluate(&NoLearning, &self.benchmarks, &self.book)
    }

    fn model(&self, params: &ParamVector) -> Result<f64, TaskError> {
        asr_evaluate(&QPolicy::new(&self.grid, &self.net, params.as_slice()), &self.benchmarks, &self.book)
    }
}

fn row(scenario: &str, seed: u64, round: Option<u64>, agent: Option<u32>, metric: &str, value: f64) -> MetricRow {
    MetricRow { scenario: scenario.to_string(), seed, round, agent, metric: metric.to_string(), value }
}

fn benefit_pct(asr: f64, nl: f64) -> f64 {
    100.0 * (asr - nl) / nl
}

fn ledger_config(cfg: &ExperimentConfig, seed: u64) -> LedgerConfig {
    LedgerConfig {
        gas: cfg.gas,
        latency: cfg.latency,
        tie_break_seed: seed::derive(seed, &[seed::tag::LEDGER]),
        ..LedgerConfig::default()
    }
}

fn make_agents(cfg: &ExperimentConfig, task: &TaxiTask, n: usize, budget: usize, seed: u64) -> Result<Vec<Agent>, AgentError> {
    let init = task.initial_model();
    (0..n)
        .map(|j| {
            Agent::new(AgentId(j as u32), init.clone(), budget, seed, Box::new(task.trainer(vec![j as u64])))
                .map(|a| a.with_timing(cfg.timing))
        })
        .collect()
}

/// Per-agent and per-round rows shared by the chunked protocol and RandomDFL.
fn record_round(run: &mut SeedRun, label: &str, seed: u64, round: u64, outcomes: &[RoundOutcome], tick_per_step: u64) {
    for o in outcomes {
        let a = Some(o.agent);
        run.rows.push(row(label, seed, Some(round), a, "gas", o.gas as f64));
        run.rows.push(row(label, seed, Some(round), a, "push_ticks", o.push_ticks as f64));
        run.rows.push(row(label, seed, Some(round), a, "train_ticks", (o.train_steps * tick_per_step) as f64));
    }
    let losses: Vec<f64> = outcomes.iter().map(|o| o.training_loss).collect();
    run.rows.push(row(label, seed, Some(round), None, "training_loss", mean_std(&losses).mean));
    let train_ticks: u64 = outcomes.iter().map(|o| o.train_steps * tick_per_step).sum();
    run.rows.push(row(label, seed, Some(round), None, "train_ticks", train_ticks as f64));
}

fn finish_gas(run: &mut SeedRun, label: &str, seed: u64, rounds: usize, gas: &[u64], push_ticks: &[u64], ledger_total: u64) {
    let total: u64 = gas.iter().sum();
    run.scalars.insert("gas_per_round".into(), total as f64 / rounds as f64);
    run.scalars.insert("push_ticks_per_round".into(), push_ticks.iter().sum::<u64>() as f64 / rounds as f64);
    run.scalars.insert("total_gas".into(), total as f64);
    run.scalars.insert("ledger_gas".into(), ledger_total as f64);
    run.rows.push(row(label, seed, None, None, "total_gas", total as f64));
}

fn run_protocol(cfg: &ExperimentConfig, cell: &CellSpec, task: &TaxiTask, eval: &Evaluator, seed: u64, nl: f64, run: &mut SeedRun) -> Result<(), ExperimentError> {
    let init = task.initial_model();
    let scheme: PartitionScheme = build_partition(init.len(), cell.chunk_size_bytes)?;
    let contract = SmartContract::register_model(scheme, cell.participation_level, &init, ContractConfig::default())?;
    let ledger = Ledger::new(contract, ledger_config(cfg, seed));
    let agents = make_agents(cfg, task, cell.n, cell.budget, seed)?;
    let fleet_cfg = FleetConfig { schedule: cfg.schedule(), ..FleetConfig::default() };
    let mut fleet = Fleet::new(agents, ledger, fleet_cfg)?;
    let (mut gas, mut ticks) = (Vec::new(), Vec::new());
    let label = cell.label.as_str();
    for k in 0..cfg.rounds {
        let r: ProtocolRound = fleet.step()?;
        let round = k as u64;
        record_round(run, label, seed, round, &r.outcomes, cfg.timing.ticks_per_train_step);
        run.rows.push(row(label, seed, Some(round), None, "gas", r.gas as f64));
        run.rows.push(row(label, seed, Some(round), None, "push_ticks", r.push_ticks as f64));
        run.rows.push(row(label, seed, Some(round), None, "stored_chunks", r.stored as f64));
        run.rows.push(row(label, seed, Some(round), None, "timed_out", f64::from(u8::from(r.timed_out))));
        gas.push(r.gas);
        ticks.push(r.push_ticks);
        if cfg.eval_every > 0 && (k + 1) % cfg.eval_every == 0 && k + 1 < cfg.rounds {
            let asr = eval.model(&fleet.contract().global_model()?)?;
            run.rows.push(row(label, seed, Some(round), None, "asr/BAFFLE", asr));
            run.rows.push(row(label, seed, Some(round), None, "benefit_pct/BAFFLE", benefit_pct(asr, nl)));
        }
    }
    let ledger_total = fleet.ledger().gas_by_sender().values().sum();
    finish_gas(run, label, seed, cfg.rounds, &gas, &ticks, ledger_total);
    run.asr.insert("BAFFLE", eval.model(&fleet.contract().global_model()?)?);
    Ok(())
}

fn run_random_dfl(cfg: &ExperimentConfig, cell: &CellSpec, task: &TaxiTask, eval: &Evaluator, seed: u64, run: &mut SeedRun) -> Result<(), ExperimentError> {
    let init = task.initial_model();
    let scheme = build_partition(init.len(), cell.chunk_size_bytes)?;
    let ledger = Ledger::new(ChunkStore::new(scheme, &init)?, ledger_config(cfg, seed));
    let agents = make_agents(cfg, task, cell.n, cell.budget, seed)?;
    let mut fleet = RandomDflFleet::new(agents, ledger, cfg.schedule())?;
    let (mut gas, mut ticks) = (Vec::new(), Vec::new());
    let mut wasted = 0u64;
    let label = cell.label.as_str();
    for k in 0..cfg.rounds {
        let r = fleet.step()?;
        let round = k as u64;
        record_round(run, label, seed, round, &r.outcomes, cfg.timing.ticks_per_train_step);
        run.rows.push(row(label, seed, Some(round), None, "gas", r.gas as f64));
        run.rows.push(row(label, seed, Some(round), None, "push_ticks", r.push_ticks as f64));
        run.rows.push(row(label, seed, Some(round), None, "stored_chunks", r.writes as f64));
        run.rows.push(row(label, seed, Some(round), None, "wasted_updates", r.wasted as f64));
        gas.push(r.gas);
        ticks.push(r.push_ticks);
        wasted += r.wasted;
    }
    let ledger_total = fleet.ledger().gas_by_sender().values().sum();
    finish_gas(run, label, seed, cfg.rounds, &gas, &ticks, ledger_total);
    run.scalars.insert("wasted_per_round".into(), wasted as f64 / cfg.rounds as f64);
    run.asr.insert("RandomDFL", eval.model(&fleet.ledger().machine().global_model()?)?);
    Ok(())
}

fn run_baselines(cfg: &ExperimentConfig, cell: &CellSpec, task: &TaxiTask, eval: &Evaluator, seed: u64, run: &mut SeedRun) -> Result<(), ExperimentError> {
    let rounds = cfg.rounds as u64;
    let mut ll = Vec::new();
    for j in 0..cfg.ll_agents.min(cell.n) {
        let (model, _) = ll_train(&mut task.trainer(vec![j as u64]), task.initial_model(), rounds)?;
        ll.push(eval.model(&model)?);
    }
    run.asr.insert("LL", mean_std(&ll).mean);

    let mut cfl = CflAggregator::new(task.initial_model(), cell.n, seed::derive(seed, &[seed::tag::CFL_SELECT]))?;
    let mut trainers: Vec<Box<dyn LocalTrainer>> =
        (0..cell.n).map(|j| Box::new(task.trainer(vec![j as u64])) as Box<dyn LocalTrainer>).collect();
    for _ in 0..rounds {
        cfl.cfl_round(&mut trainers)?;
    }
    run.asr.insert("CFL", eval.model(cfl.global())?);
    Ok(())
}

fn run_cell_seed(cfg: &ExperimentConfig, cell: &CellSpec, seed: u64) -> Result<SeedRun, ExperimentError> {
    let grid = CityGrid::new(cfg.grid.side, cfg.grid.slots)?;
    let task = TaxiTask::new(grid, cfg.demand.clone(), cfg.nfq.clone(), cfg.rides_per_agent_per_round, seed)?;
    let eval = Evaluator::new(cfg, &task, seed)?;
    let mut run = SeedRun::new();
    let nl = eval.no_learning()?;
    run.asr.insert("NL", nl);
    if cell.random_dfl {
        run_random_dfl(cfg, cell, &task, &eval, seed, &mut run)?;
    } else {
        run_protocol(cfg, cell, &task, &eval, seed, nl, &mut run)?;
    }
    if cell.baselines {
        run_baselines(cfg, cell, &task, &eval, seed, &mut run)?;
    }
    for (&policy, &asr) in &run.asr {
        let (round, label) = (Some(cfg.rounds as u64 - 1), cell.label.as_str());
        run.rows.push(row(label, seed, round, None, &format!("asr/{policy}"), asr));
        run.rows.push(row(label, seed, round, None, &format!("benefit_pct/{policy}"), benefit_pct(asr, nl)));
    }
    Ok(run)
}

const POLICY_ORDER: [&str; 5] = ["NL", "LL", "CFL", "BAFFLE", "RandomDFL"];

fn summarize_cell(cell: &CellSpec, chunk_count: usize, seeds: &[u64], runs: &[SeedRun]) -> CellSummary {
    let mut metrics: BTreeMap<String, Stat> = BTreeMap::new();
    let names: std::collections::BTreeSet<&String> = runs.iter().flat_map(|r| r.scalars.keys()).collect();
    for name in names {
        let xs: Vec<f64> = runs.iter().filter_map(|r| r.scalars.get(name).copied()).collect();
        metrics.insert(name.clone(), mean_std(&xs));
    }
    let per_policy = |p: &str| -> Option<Vec<f64>> { runs.iter().map(|r| r.asr.get(p).copied()).collect() };
    let nl = per_policy("NL").unwrap_or_default();
    let mut asr = Vec::new();
    for p in POLICY_ORDER {
        let Some(xs) = per_policy(p) else { continue };
        let benefits: Vec<f64> = xs.iter().zip(&nl).map(|(a, b)| benefit_pct(*a, *b)).collect();
        let s = mean_std(&xs);
        let b = mean_std(&benefits);
        metrics.insert(format!("asr/{p}"), s);
        metrics.insert(format!("benefit_pct/{p}"), b);
        asr.push(AsrReport { policy: p.to_string(), seeds: seeds.len(), asr_mean: s.mean, asr_std: s.std, benefit_pct_vs_nl: b.mean });
    }
    let mut comparisons = Vec::new();
    for (lo, hi) in [("NL", "LL"), ("LL", "CFL"), ("LL", "BAFFLE"), ("NL", "BAFFLE"), ("CFL", "BAFFLE")] {
        if let (Some(a), Some(b)) = (per_policy(lo), per_policy(hi)) {
            comparisons.push(paired_t_greater(lo, &a, hi, &b));
        }
    }
    CellSummary {
        label: cell.label.clone(),
        n: cell.n,
        participation_level: cell.participation_level,
        budget: cell.budget,
        chunk_size_bytes: cell.chunk_size_bytes,
        chunk_count,
        metrics,
        asr,
        comparisons,
    }
}

fn run_lemma(cfg: &ExperimentConfig) -> Result<MetricsBundle, ExperimentError> {
    let lc = EquivalenceConfig { seed: cfg.seed, ..cfg.lemma };
    let report = equivalence_experiment(&lc)?;
    let mut rows = Vec::new();
    for r in &report.rounds {
        let k = Some(r.round as u64);
        rows.push(row("lemma", lc.seed, k, None, "cfl_mean", r.cfl_mean));
        rows.push(row("lemma", lc.seed, k, None, "baffle_mean", r.baffle_mean));
        rows.push(row("lemma", lc.seed, k, None, "baffle_se", r.baffle_se));
        rows.push(row("lemma", lc.seed, k, None, "within", f64::from(u8::from(r.within))));
    }
    let summary = Summary { scenario: Scenario::Lemma, seeds: vec![lc.seed], cells: Vec::new(), lemma: Some(report) };
    Ok(MetricsBundle { scenario: Scenario::Lemma, rows, summary })
}

/// Run every cell of the configured scenario for every seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsBundle, ExperimentError> {
    cfg.validate()?;
    if cfg.scenario == Scenario::Lemma {
        return run_lemma(cfg);
    }
    let seeds = cfg.seed_values();
    let params = cfg.param_count();
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for cell in cfg.cells() {
        let chunk_count = build_partition(params, cell.chunk_size_bytes)?.chunk_count();
        let mut runs = Vec::with_capacity(seeds.len());
        for &s in &seeds {
            let mut r = run_cell_seed(cfg, &cell, s)?;
            rows.append(&mut r.rows);
            runs.push(r);
        }
        cells.push(summarize_cell(&cell, chunk_count, &seeds, &runs));
    }
    let summary = Summary { scenario: cfg.scenario, seeds, cells, lemma: None };
    Ok(MetricsBundle { scenario: cfg.scenario, rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pl_examples() {
        assert_eq!(pl_to_count(0.05, 64), 4);
        assert_eq!(pl_to_count(1.0, 16), 16);
        assert_eq!(pl_to_count(0.05, 1), 1);
    }

    #[test]
    fn validation_lists_every_violation() {
        let cfg = ExperimentConfig {
            n: 0,
            rounds: 0,
            participation: Participation::Fraction(1.5),
            ..ExperimentConfig::default()
        };
        let Err(ExperimentError::Invalid(v)) = cfg.validate() else { panic!("accepted invalid config") };
        assert!(v.iter().any(|m| m.starts_with("n ")), "{v:?}");
        assert!(v.iter().any(|m| m.starts_with("rounds")), "{v:?}");
        assert!(v.iter().any(|m| m.contains("fraction 1.5")), "{v:?}");
        assert!(ExperimentConfig::default().validate().is_ok());
    }

    #[test]
    fn budget_beyond_chunks_is_reported() {
        let cfg = ExperimentConfig { chunk_size_bytes: 16384, ..ExperimentConfig::default() };
        let Err(ExperimentError::Invalid(v)) = cfg.validate() else { panic!() };
        assert!(v[0].contains("exceeds the 5 chunks"), "{v:?}");
    }

    #[test]
    fn json_defaults_and_unknown_fields() {
        let cfg = ExperimentConfig::from_json(r#"{"scenario": "pl_sweep", "participation": {"count": 3}}"#).unwrap();
        assert_eq!(cfg.scenario, Scenario::PlSweep);
        assert_eq!(cfg.participation.resolve(16), 3);
        assert_eq!(cfg.rounds, 50);
        assert!(ExperimentConfig::from_json(r#"{"rounds_typo": 3}"#).is_err());
        assert_eq!("lemma".parse::<Scenario>().unwrap(), Scenario::Lemma);
    }
}
