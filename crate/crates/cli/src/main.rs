use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hbfl_cli::experiment::{partition_report, resume_experiment, run_experiment};
use hbfl_cli::spec::{parse_spec, Overrides};
use hbfl_cli::verify::{run_suite, tampered_niw_server_update, Suite, Targets};
use hbfl_cli::Result;
use hbfl_core::runtime::{RoundRecord, Strategy};

#[derive(Parser)]
#[command(name = "hbfl", version, about = "Hierarchical Bayesian federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Default)]
struct Flags {
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory (takes precedence over HBFL_OUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the number of training rounds.
    #[arg(long)]
    rounds: Option<usize>,
    /// Override the strategy (niw, mixture, fedavg, fedprox, fedbabu).
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
}

impl Flags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            rounds: self.rounds,
            strategy: self.strategy,
        }
    }
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: hbfl_core::Error| e.to_string())
}

#[derive(Clone, Copy, ValueEnum)]
enum Mutant {
    /// Variance update with an off-by-one denominator.
    V0Denominator,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON spec.
    Run {
        spec: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Continue a run from its checkpoint file.
    Resume {
        checkpoint: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Run a property suite: reductions, oracles, samplers or convergence.
    Verify {
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Check a deliberately broken implementation (negative control).
        #[arg(long, value_enum, hide = true)]
        mutant: Option<Mutant>,
    },
    /// Print per-client label histograms of a spec's partition as CSV.
    PartitionReport {
        spec: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
}

fn log_round(r: &RoundRecord) {
    let acc = r.global_acc.map(|a| format!("{:.4}", a)).unwrap_or_else(|| "-".into());
    eprintln!(
        "round {:>4}  acc {acc}  client loss {:.4}  objective {}",
        r.round,
        r.mean_client_loss,
        r.objective.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into())
    );
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { spec, flags } => {
            let mut spec = parse_spec(&spec)?;
            spec.apply(&flags.overrides())?;
            let summary = run_experiment(&spec, &mut log_round)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(true)
        }
        Command::Resume { checkpoint, flags } => {
            let summary = resume_experiment(&checkpoint, |s| s.apply(&flags.overrides()), &mut log_round)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(true)
        }
        Command::Verify {
            suite,
            seed,
            report,
            mutant,
        } => {
            let suite: Suite = suite.parse()?;
            let mut targets = Targets::default();
            if let Some(Mutant::V0Denominator) = mutant {
                targets.niw_server_update = tampered_niw_server_update;
            }
            let rep = run_suite(suite, seed, &targets)?;
            for line in rep.lines() {
                eprintln!("{line}");
            }
            let json = serde_json::to_string_pretty(&rep)?;
            match report {
                Some(path) => std::fs::write(&path, json).map_err(|e| hbfl_cli::CliError::Io { path, source: e })?,
                None => println!("{json}"),
            }
            Ok(rep.passed)
        }
        Command::PartitionReport { spec, flags } => {
            let mut spec = parse_spec(&spec)?;
            spec.apply(&flags.overrides())?;
            print!("{}", partition_report(&spec)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(2)
        }
    }
}
