use clap::{Parser, Subcommand};
use hitmdp_lab::config::{load_config, Command as Workflow};
use hitmdp_lab::runner;
use hitmdp_lab::LabError;
use std::path::PathBuf;
use std::process::ExitCode;

/// Config-driven experiment runner for the HiT-MDP option laboratory.
#[derive(Parser)]
#[command(name = "hitmdp-lab", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config (JSON with a required "version" field).
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path overrides, e.g. --set vmoc.gamma=0.99
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root seed; overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config's out.
    #[arg(long)]
    out: Option<String>,
    /// Worker-thread cap for internal parallelism.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum CliCommand {
    /// Train the off-policy option-critic agent.
    TrainVmoc(RunArgs),
    /// Exact soft option policy iteration on a finite environment.
    SolveTabular(RunArgs),
    /// Validate a homomorphism and check its value/objective guarantees.
    CheckHomomorphism(RunArgs),
    /// Cold-start latent-reasoning training on a synthetic corpus.
    Coldstart(RunArgs),
    /// Summarize a metrics.csv written by train-vmoc.
    ReplayMetrics(RunArgs),
}

fn execute(command: Workflow, args: &RunArgs) -> Result<(), LabError> {
    let config = load_config(
        &args.config,
        &args.overrides,
        args.seed,
        args.out.clone(),
        args.threads,
        command,
    )?;
    match command {
        Workflow::TrainVmoc => runner::train_vmoc(&config).map(drop),
        Workflow::SolveTabular => runner::solve_tabular(&config).map(drop),
        Workflow::CheckHomomorphism => runner::check_homomorphism(&config).map(drop),
        Workflow::Coldstart => runner::run_coldstart(&config).map(drop),
        Workflow::ReplayMetrics => runner::replay_metrics(&config).map(drop),
    }
}

fn main() -> ExitCode {
    // HITMDP_LAB_LOG in {error, info, debug} controls verbosity.
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("HITMDP_LAB_LOG", "error"),
    )
    .format_timestamp(None)
    .init();

    let cli = Cli::parse();
    let (command, args) = match &cli.command {
        CliCommand::TrainVmoc(a) => (Workflow::TrainVmoc, a),
        CliCommand::SolveTabular(a) => (Workflow::SolveTabular, a),
        CliCommand::CheckHomomorphism(a) => (Workflow::CheckHomomorphism, a),
        CliCommand::Coldstart(a) => (Workflow::Coldstart, a),
        CliCommand::ReplayMetrics(a) => (Workflow::ReplayMetrics, a),
    };
    match execute(command, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
