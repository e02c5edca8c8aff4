use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use imoc::run::{
    export_visualization, run_ablation, run_sweep, run_training, write_json, RunCheckpoint, RunConfig, Variant,
};
use imoc::verify::{run_suite, SuiteConfig};
use imoc::Result;

/// InfoMax option critic experiments. Relative output directories are
/// resolved against $IMOC_OUTPUT_ROOT when it is set.
#[derive(Parser, Debug)]
#[command(name = "imoc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one agent and write config.toml, log.csv and checkpoint.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// key=value, dotted keys reach nested tables (agent.c_mu=0.3).
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Overrides output_dir from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and print the returns as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export per-option action probabilities, β, Q and terminating regions.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the base config and each variant over the same seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated: eps_greedy_selection, disable_mi_reg,
        /// n_step_advantage, truncated_advantage.
        #[arg(long, default_value = "")]
        variants: String,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train once per entry of the config's n_options_sweep.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the oracle verification suite.
    OracleCheck {
        #[arg(long, default_value_t = 30)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Serialize)]
struct EvalOutput {
    episodes: usize,
    mean_return: f64,
    returns: Vec<f64>,
    option_starts: Vec<u64>,
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, seed, overrides, out } => {
            let mut cfg = RunConfig::load(&config, &overrides)?;
            if seed.is_some() {
                cfg.seed = seed;
            }
            if out.is_some() {
                cfg.output_dir = out;
            }
            let dir = cfg.output_path();
            let summary = run_training(&cfg, Some(&dir))?;
            println!("final return {:.4} ({} log rows) in {}", summary.final_return, summary.rows.len(), dir.display());
        }
        Command::Eval { checkpoint, episodes, seed } => {
            let agent = RunCheckpoint::load(&checkpoint)?.agent()?;
            let report = agent.evaluate(episodes, &mut ChaCha8Rng::seed_from_u64(seed))?;
            print_json(&EvalOutput {
                episodes,
                mean_return: report.mean_return(),
                option_starts: report.option_starts.clone(),
                returns: report.returns,
            })?;
        }
        Command::Viz { checkpoint, out, episodes, seed } => {
            let agent = RunCheckpoint::load(&checkpoint)?.agent()?;
            let viz = export_visualization(&agent, episodes, &mut ChaCha8Rng::seed_from_u64(seed))?;
            write_json(&out, &viz)?;
            println!("wrote {} options × {} cells to {}", viz.n_options, viz.options[0].cells.len(), out.display());
        }
        Command::Ablate { config, variants, seeds, overrides } => {
            let cfg = RunConfig::load(&config, &overrides)?;
            let variants = Variant::parse_list(&variants)?;
            let dir = cfg.output_path();
            let table = run_ablation(&cfg, &variants, &seeds, Some(&dir))?;
            table.write_csv(&dir.join("ablation.csv"))?;
            for s in table.summary() {
                println!("{:<22} n={} final return {:.4} ± {:.4}", s.config, s.n, s.mean, s.std);
            }
        }
        Command::Sweep { config, seeds, overrides } => {
            let cfg = RunConfig::load(&config, &overrides)?;
            let dir = cfg.output_path();
            let table = run_sweep(&cfg, &seeds, Some(&dir))?;
            table.write_csv(&dir.join("sweep.csv"))?;
            for s in table.summary() {
                println!("{:<22} n={} final return {:.4} ± {:.4}", s.config, s.n, s.mean, s.std);
            }
        }
        Command::OracleCheck { instances, seed } => {
            let results = run_suite(&SuiteConfig { instances, seed, ..Default::default() })?;
            for r in &results {
                println!("{}", r.line());
            }
            return Ok(results.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
