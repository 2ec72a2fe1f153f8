pub mod agent;
pub mod baselines;
pub mod contract;
pub mod experiment;
pub mod ledger;
pub mod lemma;
pub mod params;
pub mod seed;
pub mod task;
