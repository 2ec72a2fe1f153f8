//! Chunk win probability, per-round update probability, and the learning
//! rate that makes chunked bidding match federated averaging in expectation.
//!
//! With `p = B/C`, a bidder on chunk `c` faces `D ~ Binomial(L−1, p)` rivals
//! and wins with probability `1/(D+1)` under a uniform winner, so
//!
//! ```text
//! μ = E[1/(D+1)] = Σ_{d=0}^{L−1} 1/(d+1) · C(L−1, d) p^d (1−p)^{L−1−d} = (1 − (1−p)^L) / (L p)
//! ```
//!
//! and a participant updates a given chunk with probability `μ p`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;
use thiserror::Error;

use crate::agent::{Agent, AgentError, Fleet, FleetConfig, LocalTrainer, TrainError, TrainStats, UpdateOrder};
use crate::baselines::{BaselineError, CflAggregator};
use crate::contract::{ContractConfig, ContractError, SmartContract};
use crate::ledger::{AgentId, Ledger, LedgerConfig};
use crate::params::{build_partition, ParamError, ParamVector, BYTES_PER_PARAM};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LemmaError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

fn check(l: u64, b: u64, c: u64) -> Result<f64, LemmaError> {
    if l == 0 {
        return Err(LemmaError::Domain("need at least one participant".into()));
    }
    if b == 0 || b > c {
        return Err(LemmaError::Domain(format!("budget {b} must lie in 1..={c}")));
    }
    Ok(b as f64 / c as f64)
}

/// Win probability of a bidder on a contested chunk, by direct summation
/// with log-domain binomial weights.
pub fn mu(l: u64, b: u64, c: u64) -> Result<f64, LemmaError> {
    let p = check(l, b, c)?;
    if p == 1.0 {
        return Ok(1.0 / l as f64);
    }
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let rivals = l - 1;
    Ok((0..=rivals)
        .map(|d| {
            let ln_w = ln_binomial(rivals, d) + d as f64 * lp + (rivals - d) as f64 * lq;
            ln_w.exp() / (d + 1) as f64
        })
        .sum())
}

pub fn mu_closed_form(l: u64, b: u64, c: u64) -> Result<f64, LemmaError> {
    let p = check(l, b, c)?;
    Ok((1.0 - (1.0 - p).powi(l as i32)) / (l as f64 * p))
}

/// Probability that one participant updates a given chunk in a round: `μ · B/C`.
pub fn chunk_update_probability(l: u64, b: u64, c: u64) -> Result<f64, LemmaError> {
    Ok(mu(l, b, c)? * b as f64 / c as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaParams {
    pub n: u64,
    pub chunks: u64,
    pub budget: u64,
    pub participants: u64,
    pub alpha_fl: f64,
    pub alpha_bfl: f64,
    pub eta_fl: f64,
}

impl LemmaParams {
    pub fn validate(&self) -> Result<(), LemmaError> {
        check(self.participants, self.budget, self.chunks)?;
        if self.participants > self.n {
            return Err(LemmaError::Domain(format!("{} participants exceed {} devices", self.participants, self.n)));
        }
        for (name, a) in [("alpha_fl", self.alpha_fl), ("alpha_bfl", self.alpha_bfl)] {
            if !(a > 0.0 && a <= 1.0) {
                return Err(LemmaError::Domain(format!("{name} {a} outside (0, 1]")));
            }
        }
        if !(self.eta_fl > 0.0 && self.eta_fl.is_finite()) {
            return Err(LemmaError::Domain(format!("learning rate {} must be positive", self.eta_fl)));
        }
        Ok(())
    }
}

/// `η_BFL = 2 C α_FL / (B μ L α_BFL) · η_FL`.
pub fn eta_bfl(p: &LemmaParams) -> Result<f64, LemmaError> {
    p.validate()?;
    let m = mu(p.participants, p.budget, p.chunks)?;
    let denom = p.budget as f64 * m * p.participants as f64 * p.alpha_bfl;
    if denom == 0.0 || !denom.is_finite() {
        return Err(LemmaError::Domain("zero denominator".into()));
    }
    Ok(2.0 * p.chunks as f64 * p.alpha_fl / denom * p.eta_fl)
}

/// `f(w) = ½ Σ h_i (w_i − w*_i)²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quadratic {
    pub curvature: Vec<f64>,
    pub minimizer: Vec<f64>,
}

impl Quadratic {
    /// Curvatures in `[0.5, 1.5)`, minimizer in `[1, 2)`.
    pub fn random(dim: usize, seed: u64) -> Self {
        let mut rng = seed::stream(seed, &[seed::tag::INIT, 0x9A]);
        let curvature = (0..dim).map(|_| rng.gen_range(0.5..1.5)).collect();
        let minimizer = (0..dim).map(|_| rng.gen_range(1.0..2.0)).collect();
        Self { curvature, minimizer }
    }

    pub fn value(&self, w: &[f32]) -> f64 {
        w.iter()
            .zip(self.curvature.iter().zip(&self.minimizer))
            .map(|(&x, (h, m))| 0.5 * h * (f64::from(x) - m).powi(2))
            .sum()
    }

    /// Largest `|1 − η h_i|`; the gradient iteration converges iff it is below 1.
    pub fn contraction(&self, eta: f64) -> f64 {
        self.curvature.iter().map(|h| (1.0 - eta * h).abs()).fold(0.0, f64::max)
    }
}

/// One full gradient step per round, the same data on every agent.
pub struct QuadraticTrainer {
    objective: Arc<Quadratic>,
    eta: f64,
}

impl QuadraticTrainer {
    pub fn new(objective: Arc<Quadratic>, eta: f64) -> Self {
        Self { objective, eta }
    }
}

impl LocalTrainer for QuadraticTrainer {
    fn train(&mut self, _iteration: u64, model: &mut [f32]) -> Result<TrainStats, TrainError> {
        if model.len() != self.objective.curvature.len() {
            return Err(TrainError::Data("model and objective dimensions differ".into()));
        }
        let loss = self.objective.value(model);
        for ((w, h), m) in model.iter_mut().zip(&self.objective.curvature).zip(&self.objective.minimizer) {
            let x = f64::from(*w);
            *w = (x - self.eta * h * (x - m)) as f32;
        }
        Ok(TrainStats { loss, steps: 1 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EquivalenceConfig {
    pub n: usize,
    pub chunks: usize,
    pub budget: usize,
    pub participants: usize,
    pub params_per_chunk: usize,
    pub rounds: usize,
    pub seeds: usize,
    pub eta_fl: f64,
    pub alpha_fl: f64,
    pub alpha_bfl: f64,
    /// Multiplies the derived BAFFLE rate; 1 is the prediction, anything
    /// else is a deliberate fault.
    pub eta_scale: f64,
    /// Agreement band in standard errors.
    pub z_tolerance: f64,
    pub seed: u64,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        Self {
            n: 8,
            chunks: 16,
            budget: 4,
            participants: 4,
            params_per_chunk: 4,
            rounds: 200,
            seeds: 64,
            eta_fl: 0.01,
            alpha_fl: 1.0,
            alpha_bfl: 1.0,
            eta_scale: 1.0,
            z_tolerance: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundComparison {
    pub round: usize,
    pub cfl_mean: f64,
    pub cfl_se: f64,
    pub baffle_mean: f64,
    pub baffle_se: f64,
    pub within: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub config: EquivalenceConfig,
    pub mu: f64,
    pub eta_bfl: f64,
    /// Per round, the mean parameter value (a linear functional, so its
    /// expectation follows the expected update exactly).
    pub rounds: Vec<RoundComparison>,
    pub rounds_outside: usize,
    pub all_within: bool,
    pub diagnostic: Option<String>,
}

fn mean_param(v: &ParamVector) -> f64 {
    v.as_slice().iter().map(|&x| f64::from(x)).sum::<f64>() / v.len() as f64
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn baffle_trajectory(cfg: &EquivalenceConfig, objective: &Arc<Quadratic>, eta: f64, run: u64) -> Result<Vec<f64>, LemmaError> {
    let dim = cfg.chunks * cfg.params_per_chunk;
    let scheme = build_partition(dim, cfg.params_per_chunk * BYTES_PER_PARAM)?;
    let init = ParamVector::zeros(dim)?;
    let contract = SmartContract::register_model(scheme, cfg.participants, &init, ContractConfig::default())?;
    let run_seed = seed::derive(cfg.seed, &[run]);
    let ledger = Ledger::new(contract, LedgerConfig { tie_break_seed: run_seed, ..LedgerConfig::default() });
    let agents = (0..cfg.n)
        .map(|j| {
            let trainer = Box::new(QuadraticTrainer::new(objective.clone(), eta));
            Agent::new(AgentId(j as u32), init.clone(), cfg.budget, run_seed, trainer)
                .map(|a| a.with_order(UpdateOrder::TrainFromGlobalThenAverage))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut fleet = Fleet::new(agents, ledger, FleetConfig::default())?;
    let mut out = vec![mean_param(&init)];
    for _ in 0..cfg.rounds {
        fleet.step()?;
        out.push(mean_param(&fleet.contract().global_model()?));
    }
    Ok(out)
}

fn cfl_trajectory(cfg: &EquivalenceConfig, objective: &Arc<Quadratic>, run: u64) -> Result<Vec<f64>, LemmaError> {
    let dim = cfg.chunks * cfg.params_per_chunk;
    let selected = ((cfg.alpha_fl * cfg.n as f64).round() as usize).clamp(1, cfg.n);
    let mut agg = CflAggregator::new(ParamVector::zeros(dim)?, selected, seed::derive(cfg.seed, &[run]))?;
    let mut trainers: Vec<Box<dyn LocalTrainer>> = (0..cfg.n)
        .map(|_| Box::new(QuadraticTrainer::new(objective.clone(), cfg.eta_fl)) as Box<dyn LocalTrainer>)
        .collect();
    let mut out = vec![mean_param(agg.global())];
    for _ in 0..cfg.rounds {
        agg.cfl_round(&mut trainers)?;
        out.push(mean_param(agg.global()));
    }
    Ok(out)
}

/// Run both learners over `seeds` independent runs and compare the
/// per-round means of the average parameter value.
pub fn equivalence_experiment(cfg: &EquivalenceConfig) -> Result<EquivalenceReport, LemmaError> {
    let params = LemmaParams {
        n: cfg.n as u64,
        chunks: cfg.chunks as u64,
        budget: cfg.budget as u64,
        participants: cfg.participants as u64,
        alpha_fl: cfg.alpha_fl,
        alpha_bfl: cfg.alpha_bfl,
        eta_fl: cfg.eta_fl,
    };
    let eta = eta_bfl(&params)?;
    let m = mu(params.participants, params.budget, params.chunks)?;
    if cfg.seeds == 0 || cfg.params_per_chunk == 0 {
        return Err(LemmaError::Domain("need at least one seed and one parameter per chunk".into()));
    }
    let objective = Arc::new(Quadratic::random(cfg.chunks * cfg.params_per_chunk, cfg.seed));
    let mut baffle = Vec::with_capacity(cfg.seeds);
    let mut cfl = Vec::with_capacity(cfg.seeds);
    for run in 0..cfg.seeds as u64 {
        baffle.push(baffle_trajectory(cfg, &objective, eta * cfg.eta_scale, run)?);
        cfl.push(cfl_trajectory(cfg, &objective, run)?);
    }
    let rounds: Vec<RoundComparison> = (0..=cfg.rounds)
        .map(|r| {
            let (baffle_mean, baffle_se) = mean_se(&baffle.iter().map(|t| t[r]).collect::<Vec<_>>());
            let (cfl_mean, cfl_se) = mean_se(&cfl.iter().map(|t| t[r]).collect::<Vec<_>>());
            let band = cfg.z_tolerance * (baffle_se.powi(2) + cfl_se.powi(2)).sqrt();
            RoundComparison { round: r, cfl_mean, cfl_se, baffle_mean, baffle_se, within: (baffle_mean - cfl_mean).abs() <= band }
        })
        .collect();
    let rounds_outside = rounds.iter().filter(|r| !r.within).count();
    let q = 1.0 - (1.0 - cfg.budget as f64 / cfg.chunks as f64).powi(cfg.participants as i32);
    let diagnostic = [
        (objective.contraction(cfg.eta_fl), "federated averaging"),
        (objective.contraction(eta * cfg.eta_scale * q / 2.0), "chunked bidding (expected step)"),
    ]
    .iter()
    .find(|(c, _)| *c >= 1.0)
    .map(|(c, who)| format!("{who} does not converge: contraction factor {c:.3} >= 1"));
    Ok(EquivalenceReport { config: *cfg, mu: m, eta_bfl: eta, all_within: rounds_outside == 0, rounds_outside, rounds, diagnostic })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mu_examples() {
        assert_eq!(mu(1, 3, 7).unwrap(), 1.0);
        assert!((mu(2, 1, 2).unwrap() - 0.75).abs() < 1e-15);
        assert!((mu(10, 3, 10).unwrap() - mu_closed_form(10, 3, 10).unwrap()).abs() < 1e-12);
        assert!(matches!(mu(3, 0, 4), Err(LemmaError::Domain(_))));
        assert!(matches!(mu(3, 5, 4), Err(LemmaError::Domain(_))));
    }

    #[test]
    fn update_probability_examples() {
        for l in 1..20 {
            assert!((chunk_update_probability(l, 6, 6).unwrap() - 1.0 / l as f64).abs() < 1e-15);
        }
        assert!((chunk_update_probability(1, 1, 5).unwrap() - 0.2).abs() < 1e-15);
        let p: f64 = 16.0 / 88.0;
        let closed = (1.0 - (1.0 - p).powi(4)) / 4.0;
        assert!((chunk_update_probability(4, 16, 88).unwrap() - closed).abs() < 1e-14);
    }

    fn params(b: u64, c: u64, l: u64) -> LemmaParams {
        LemmaParams { n: 8, chunks: c, budget: b, participants: l, alpha_fl: 1.0, alpha_bfl: 1.0, eta_fl: 0.1 }
    }

    #[test]
    fn eta_examples() {
        assert!((eta_bfl(&params(5, 5, 1)).unwrap() - 0.2).abs() < 1e-15);
        let p = params(16, 88, 4);
        let m = mu(4, 16, 88).unwrap();
        assert!((eta_bfl(&p).unwrap() - 2.0 * 88.0 / (16.0 * m * 4.0) * 0.1).abs() < 1e-15);
        let doubled = LemmaParams { alpha_bfl: 0.5, ..p };
        let halved = LemmaParams { alpha_bfl: 1.0, ..p };
        assert!((eta_bfl(&doubled).unwrap() - 2.0 * eta_bfl(&halved).unwrap()).abs() < 1e-12);
        assert!(eta_bfl(&LemmaParams { participants: 9, ..p }).is_err());
        assert!(eta_bfl(&LemmaParams { alpha_fl: 0.0, ..p }).is_err());
    }

    #[test]
    fn degenerate_lemma_matches_stepwise() {
        let cfg = EquivalenceConfig { n: 1, participants: 1, chunks: 4, budget: 4, rounds: 30, seeds: 1, eta_fl: 0.05, ..Default::default() };
        let objective = Arc::new(Quadratic::random(16, cfg.seed));
        let eta = eta_bfl(&LemmaParams {
            n: 1,
            chunks: 4,
            budget: 4,
            participants: 1,
            alpha_fl: 1.0,
            alpha_bfl: 1.0,
            eta_fl: cfg.eta_fl,
        })
        .unwrap();
        let b = baffle_trajectory(&cfg, &objective, eta, 0).unwrap();
        let c = cfl_trajectory(&cfg, &objective, 0).unwrap();
        for (x, y) in b.iter().zip(&c) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn divergent_config_is_diagnosed() {
        let cfg = EquivalenceConfig { eta_fl: 3.0, rounds: 3, seeds: 2, ..Default::default() };
        let r = equivalence_experiment(&cfg).unwrap();
        assert!(r.diagnostic.is_some());
    }
}
