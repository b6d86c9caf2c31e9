use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use expo_cli::config::ExperimentConfig;
use expo_cli::{serve, CliError, Result};
use expo_core::explain::Explainer;
use expo_core::task::TaskSettings;
use expo_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "expo", version, about = "Train, evaluate and study explanation-regularized models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Grid-search and train every model in an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Comma-separated trial seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Metrics for a trained run: table.csv, curve.csv and per-model reports.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        max_anchors: Option<usize>,
    },
    /// Explain one checkpoint at one dataset row.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        row: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Run the softmax agent against the run's two task models.
    SimulateAgent {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Significance tests over a study log.
    Stats {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Serve the interactive task.
    Serve(ServeArgs),
}

#[derive(Args)]
struct ServeArgs {
    /// Run directory whose study models to serve.
    #[arg(long, conflicts_with_all = ["none", "expo", "dataset"])]
    run: Option<PathBuf>,
    #[arg(long, requires_all = ["expo", "dataset"])]
    none: Option<PathBuf>,
    #[arg(long)]
    expo: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Session log; sessions in it are restored on startup.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    rounds: usize,
    #[arg(long)]
    display_cap: Option<usize>,
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("report types serialize"));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, output_dir, seeds, epochs } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let run = expo_cli::run_experiment(&cfg)?;
            println!("architecture {}x{}", run.width, run.depth);
            for s in &run.weight_search {
                println!("{}: weight {}", s.kind, s.selected_weight);
            }
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Evaluate { run, max_anchors } => {
            let settings = match max_anchors {
                Some(k) => Some(expo_core::metrics::EvalSettings {
                    max_anchors: Some(k),
                    ..expo_cli::RunManifest::load(&run)?.eval
                }),
                None => None,
            };
            print!("{}", expo_cli::cmd_evaluate(&run, settings)?.table_csv());
        }
        Command::Explain { checkpoint, dataset, row, seed, json } => {
            let out = expo_cli::cmd_explain(&checkpoint, &dataset, row, &Explainer::default(), seed)?;
            if json {
                print_json(&out);
            } else {
                print!("{}", out.display());
            }
        }
        Command::SimulateAgent { run, rounds, lambdas, max_steps, seed } => {
            let mut sweep = expo_cli::RunManifest::load(&run)?.agent;
            sweep.rounds = rounds.unwrap_or(sweep.rounds);
            sweep.lambdas = lambdas.unwrap_or(sweep.lambdas);
            sweep.max_steps = max_steps.unwrap_or(sweep.max_steps);
            sweep.seed = seed.unwrap_or(sweep.seed);
            let report = expo_cli::cmd_simulate_agent(&run, Some(sweep))?;
            print!("{}", report.steps_csv());
            print!("{}", report.tests_csv());
        }
        Command::Stats { log, output } => print_json(&expo_cli::cmd_stats(&log, output.as_deref())?),
        Command::Serve(a) => {
            let models = match (&a.run, &a.none, &a.expo, &a.dataset) {
                (Some(run), ..) => serve::run_study_models(run)?,
                (None, Some(n), Some(e), Some(d)) => {
                    serve::checkpoint_study_models(n, e, d, Explainer::default(), TaskSettings::default())?
                }
                _ => return Err(CliError::Config("serve needs --run or all of --none, --expo and --dataset".into())),
            };
            let config = ServiceConfig { seed: a.seed, recorded_rounds: a.rounds, display_cap: a.display_cap, log_path: a.log };
            expo_cli::cmd_serve(a.addr, models, config)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.code(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
