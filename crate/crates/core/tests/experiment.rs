use std::fs;

use baffle_core::experiment::{emit_reports, run_experiment, ExperimentConfig, ExperimentError, Scenario};

fn tiny(scenario: Scenario) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_json(
        r#"{
            "n": 6,
            "budget": 4,
            "rounds": 3,
            "seeds": 2,
            "rides_per_agent_per_round": 20,
            "ll_agents": 2,
            "nfq": { "hidden": 16 },
            "benchmark": { "trajectories": 5, "max_rides": 10, "repetitions": 1, "test_rides": 300 }
        }"#,
    )
    .unwrap();
    cfg.scenario = scenario;
    cfg
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let cfg = tiny(Scenario::Benefit);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = emit_reports(&run_experiment(&cfg).unwrap(), a.path()).unwrap();
    emit_reports(&run_experiment(&cfg).unwrap(), b.path()).unwrap();
    for path in first {
        let name = path.file_name().unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name:?} differs");
    }
}

#[test]
fn benefit_reports_every_policy() {
    let bundle = run_experiment(&tiny(Scenario::Benefit)).unwrap();
    let cell = bundle.summary.cell("benefit").unwrap();
    let policies: Vec<&str> = cell.asr.iter().map(|a| a.policy.as_str()).collect();
    assert_eq!(policies, ["NL", "LL", "CFL", "BAFFLE"]);
    assert!(cell.asr.iter().all(|a| a.asr_mean.is_finite() && a.seeds == 2));
    assert!(cell.comparison("NL", "BAFFLE").is_some());
    assert!(bundle.rows.iter().any(|r| r.metric == "gas" && r.agent.is_some()));
}

#[test]
fn gas_is_accounted_once() {
    let bundle = run_experiment(&tiny(Scenario::PlSweep)).unwrap();
    for cell in &bundle.summary.cells {
        let total = cell.metric("total_gas").unwrap();
        let ledger = cell.metric("ledger_gas").unwrap();
        assert_eq!(total.mean, ledger.mean, "{}", cell.label);
        assert!(total.mean > 0.0);
    }
    let random = bundle.summary.cell("random_dfl").unwrap();
    assert!(random.metric("wasted_per_round").unwrap().mean >= 0.0);
}

#[test]
fn sensitivity_grid_reports_finite_benefit() {
    let mut cfg = tiny(Scenario::Sensitivity);
    cfg.rounds = 1;
    cfg.seeds = 1;
    cfg.nfq.hidden = 288;
    cfg.nfq.train.epochs = 1;
    let bundle = run_experiment(&cfg).unwrap();
    assert_eq!(bundle.summary.cells.len(), 12);
    for cell in &bundle.summary.cells {
        assert!(cell.chunk_count >= 32, "{} has {} chunks", cell.label, cell.chunk_count);
        assert!(cell.asr.iter().all(|a| a.benefit_pct_vs_nl.is_finite()), "{}", cell.label);
    }
}

#[test]
fn oversized_budget_is_rejected_before_running() {
    let mut cfg = tiny(Scenario::Sensitivity);
    cfg.nfq.hidden = 8;
    match cfg.validate() {
        Err(ExperimentError::Invalid(v)) => assert!(v.iter().any(|m| m.contains("exceeds")), "{v:?}"),
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn lemma_scenario_runs_the_equivalence_check() {
    let mut cfg = tiny(Scenario::Lemma);
    cfg.lemma.rounds = 20;
    cfg.lemma.seeds = 8;
    let bundle = run_experiment(&cfg).unwrap();
    let report = bundle.summary.lemma.unwrap();
    assert_eq!(report.rounds.len(), 21);
    assert!(report.mu > 0.0 && report.mu <= 1.0);
}
