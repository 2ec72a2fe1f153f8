use std::path::PathBuf;
use std::process::ExitCode;

use baffle_core::experiment::{emit_reports, run_experiment, ExperimentConfig, ExperimentError, Scenario};
use baffle_core::lemma::{chunk_update_probability, eta_bfl, mu, LemmaError, LemmaParams};
use clap::{Parser, Subcommand};

const EXIT_INVALID: u8 = 2;

#[derive(Parser)]
#[command(name = "baffle", version, about = "Chunked, aggregator-free federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write metrics.csv, summary.json and gnuplot tables.
    Run {
        /// benefit | sensitivity | scalability | pl_sweep | lemma (overrides the config file)
        #[arg(long)]
        scenario: Option<Scenario>,
        /// JSON config; omitted fields take their defaults
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base seed (overrides the config file)
        #[arg(long)]
        seed: Option<u64>,
        /// Number of seeds (overrides the config file)
        #[arg(long)]
        seeds: Option<usize>,
        /// Rounds per run (overrides the config file)
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the chunk win probability, update probability and matched learning rate.
    Lemma {
        #[arg(long = "L")]
        participants: u64,
        #[arg(long = "B")]
        budget: u64,
        #[arg(long = "C")]
        chunks: u64,
        #[arg(long, default_value_t = 1.0)]
        alpha_fl: f64,
        #[arg(long, default_value_t = 1.0)]
        alpha_bfl: f64,
        #[arg(long, default_value_t = 0.01)]
        eta_fl: f64,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig, ExperimentError> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|source| ExperimentError::Io { context: p.display().to_string(), source })?;
            ExperimentConfig::from_json(&text)
        }
    }
}

fn run(
    scenario: Option<Scenario>,
    config: Option<&PathBuf>,
    seed: Option<u64>,
    seeds: Option<usize>,
    rounds: Option<usize>,
    out: &PathBuf,
) -> Result<(), ExperimentError> {
    let mut cfg = load_config(config)?;
    if let Some(s) = scenario {
        cfg.scenario = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    if let Some(r) = rounds {
        cfg.rounds = r;
    }
    cfg.validate()?;
    let bundle = run_experiment(&cfg)?;
    for path in emit_reports(&bundle, out)? {
        println!("wrote {}", path.display());
    }
    for cell in &bundle.summary.cells {
        println!("[{}] n={} L={} B={} C={}", cell.label, cell.n, cell.participation_level, cell.budget, cell.chunk_count);
        for a in &cell.asr {
            println!(
                "  {:<10} asr {:>9.2} ± {:<8.2} benefit {:>7.2}%",
                a.policy, a.asr_mean, a.asr_std, a.benefit_pct_vs_nl
            );
        }
        for key in ["gas_per_round", "push_ticks_per_round", "wasted_per_round"] {
            if let Some(s) = cell.metric(key) {
                println!("  {key} {:.1} ± {:.1}", s.mean, s.std);
            }
        }
        for c in &cell.comparisons {
            println!("  {} < {}: mean diff {:.3}, p = {:.4}", c.lower, c.higher, c.mean_diff, c.p_value);
        }
    }
    if let Some(l) = &bundle.summary.lemma {
        println!(
            "lemma: mu {:.6}, eta_bfl {:.6}, rounds outside band {}/{}",
            l.mu,
            l.eta_bfl,
            l.rounds_outside,
            l.rounds.len()
        );
        if let Some(d) = &l.diagnostic {
            println!("  diagnostic: {d}");
        }
    }
    Ok(())
}

fn lemma(p: LemmaParams) -> Result<serde_json::Value, LemmaError> {
    Ok(serde_json::json!({
        "L": p.participants,
        "B": p.budget,
        "C": p.chunks,
        "mu": mu(p.participants, p.budget, p.chunks)?,
        "update_probability": chunk_update_probability(p.participants, p.budget, p.chunks)?,
        "eta_bfl": eta_bfl(&p)?,
    }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { scenario, config, seed, seeds, rounds, out } => {
            match run(scenario, config.as_ref(), seed, seeds, rounds, &out) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e @ ExperimentError::Invalid(_)) => {
                    eprintln!("{e}");
                    ExitCode::from(EXIT_INVALID)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Lemma { participants, budget, chunks, alpha_fl, alpha_bfl, eta_fl } => {
            let p = LemmaParams { n: participants, chunks, budget, participants, alpha_fl, alpha_bfl, eta_fl };
            match lemma(p) {
                Ok(v) => {
                    println!("{}", serde_json::to_string_pretty(&v).expect("json value"));
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::from(EXIT_INVALID)
                }
            }
        }
    }
}
