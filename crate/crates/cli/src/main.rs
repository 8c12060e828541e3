use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use qoc_cli::{commands, Outcome, RunContext};

#[derive(Parser)]
#[command(
    name = "qoc",
    about = "Optimize and analyze control pulses for qudit logic gates",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Problem definition (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Control coefficients (JSON written by optimize).
    #[arg(long)]
    alpha: Option<PathBuf>,
    /// Artifact directory; defaults to the config's output.directory, then
    /// the working directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Random seed; defaults to the config's optimizer.seed, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for independent evaluations (Hessian probe columns).
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Fault-injection hook: perturb one adjoint gradient component so the
    /// checks must fail.
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Propagate the controls and report the objective breakdown.
    Simulate(CommonArgs),
    /// Run the projected quasi-Newton optimization from --alpha or a seeded
    /// random start.
    Optimize(CommonArgs),
    /// Cross-check the adjoint gradient and the integrator round trip.
    Verify(VerifyArgs),
    /// Finite-difference Hessian probe: asymmetry sweep and eigenvalues.
    Probe(CommonArgs),
    /// Lab-frame pulse spectrum and dominant peaks.
    Spectrum(CommonArgs),
}

fn resolve(common: &CommonArgs) -> Result<RunContext> {
    RunContext::resolve(
        &common.config,
        common.alpha.as_deref(),
        common.out.as_deref(),
        common.seed,
        common.parallel,
    )
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Simulate(args) => commands::run_simulate(&resolve(&args)?),
        Command::Optimize(args) => commands::run_optimize(&resolve(&args)?),
        Command::Verify(args) => {
            commands::run_verify(&resolve(&args.common)?, args.corrupt_gradient)
        }
        Command::Probe(args) => commands::run_probe(&resolve(&args)?),
        Command::Spectrum(args) => commands::run_spectrum(&resolve(&args)?),
    }
}

fn main() {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Usage problems are exit 1; clap's default would be 2, which the
            // exit contract reserves for numerical check failures.
            let _ = err.print();
            std::process::exit(if err.use_stderr() { 1 } else { 0 });
        }
    };
    let code = match dispatch(cli) {
        Ok(outcome) => outcome.exit_code(),
        Err(err) => {
            eprintln!("error: {err:#}");
            1
        }
    };
    std::process::exit(code);
}
