//! `iflow`: dataset synthesis, training, generation, evaluation and the
//! theory checks.

mod config;
mod data;
mod error;
mod model;
mod theory;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use iflow::flow::InverseOptions;

use crate::error::CliResult;

#[derive(Parser)]
#[command(
    name = "iflow",
    version,
    about = "Invertible graph flows for conditional generation"
)]
struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Train a model; writes model.json, loss_trace.csv, summary.json.
    Train {
        /// Dataset directory (`data synth` output or a single bundle).
        #[arg(long)]
        data: PathBuf,
        /// Architecture JSON.
        #[arg(long)]
        arch: PathBuf,
        /// Training hyperparameter JSON.
        #[arg(long)]
        hparams: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample X | Y by inverting latent draws.
    Generate {
        #[arg(long)]
        model: PathBuf,
        /// CSV file of label vectors, or inline `0,1,1;1,0,0`.
        #[arg(long)]
        labels: String,
        /// Samples per label vector.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Fixed-point tolerance of the inverse.
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        /// Iteration cap per block for each inversion stage.
        #[arg(long, default_value_t = 200)]
        max_iter: usize,
    },
    /// Two-sample metrics, accuracy and invertibility audit on held-out rows.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report JSON; the table goes next to it as CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Numerical checks of the Ornstein-Uhlenbeck results.
    Theory {
        #[command(subcommand)]
        check: TheoryCommand,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Generate a synthetic dataset into `<out>/train` and `<out>/test`.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct TheoryArgs {
    /// Optional JSON overriding the built-in fixture.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for verdict.json and traces.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum TheoryCommand {
    SigmaT(TheoryArgs),
    OdeTransport(TheoryArgs),
    SdeSim(TheoryArgs),
    SpectralCheck(TheoryArgs),
    LocalCheck(TheoryArgs),
    CorollaryCheck(TheoryArgs),
    PermCheck(TheoryArgs),
}

fn dispatch(cli: Cli) -> CliResult<()> {
    config::thread_cap()?;
    let seed = cli.seed;
    match cli.command {
        Command::Data {
            command: DataCommand::Synth { spec, out },
        } => data::synth(&spec, &out, seed),
        Command::Train {
            data,
            arch,
            hparams,
            out,
        } => model::train(&data, &arch, &hparams, &out, seed),
        Command::Generate {
            model,
            labels,
            n,
            out,
            tol,
            max_iter,
        } => model::generate(
            &model,
            &labels,
            n,
            &out,
            InverseOptions { tol, max_iter },
            seed,
        ),
        Command::Evaluate { model, data, out } => model::evaluate(&model, &data, &out, seed),
        Command::Theory { check } => {
            let (name, args) = match check {
                TheoryCommand::SigmaT(a) => ("sigma-t", a),
                TheoryCommand::OdeTransport(a) => ("ode-transport", a),
                TheoryCommand::SdeSim(a) => ("sde-sim", a),
                TheoryCommand::SpectralCheck(a) => ("spectral-check", a),
                TheoryCommand::LocalCheck(a) => ("local-check", a),
                TheoryCommand::CorollaryCheck(a) => ("corollary-check", a),
                TheoryCommand::PermCheck(a) => ("perm-check", a),
            };
            theory::run(name, args.config.as_deref(), &args.out, seed).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("iflow: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
