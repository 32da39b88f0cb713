//! `dmk`: scenario runner for the dislocated-medium kinematics library.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use dmk_cli::{config, run, Report, EXIT_CONFIG, EXIT_OK, EXIT_THRESHOLD};

#[derive(Parser)]
#[command(
    name = "dmk",
    version,
    about = "Dislocated-medium kinematics: checks, reconstructions, evolutions, \
             and convergence studies driven by JSON scenario files"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the static geometry pipeline on the initial state.
    Check(RunArgs),
    /// Reconstruct the distortion by path integration and compare to truth.
    Reconstruct(RunArgs),
    /// Integrate the state in time, monitoring the geometric invariants.
    Evolve(RunArgs),
    /// Rerun the scenario on refined grids and fit convergence orders.
    Converge(ConvergeArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario description (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Directory that configured output paths are resolved against.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Suppress the report on stdout (violations still go to stderr).
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct ConvergeArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Number of refinement levels (each doubles the grid).
    #[arg(long, default_value_t = 2)]
    refine: usize,
}

fn execute(command: &Command) -> Result<(Report, &RunArgs), dmk_cli::CliError> {
    let (args, refine) = match command {
        Command::Check(args)
        | Command::Reconstruct(args)
        | Command::Evolve(args) => (args, None),
        Command::Converge(converge) => (&converge.run, Some(converge.refine)),
    };
    let scenario = config::ScenarioConfig::load(&args.config)?;
    let report = match command {
        Command::Check(_) => run::run_check(&scenario, &args.out)?,
        Command::Reconstruct(_) => run::run_reconstruct(&scenario, &args.out)?,
        Command::Evolve(_) => run::run_evolve(&scenario, &args.out)?,
        Command::Converge(_) => {
            run::run_convergence(&scenario, refine.expect("converge carries refine"), &args.out)?
        }
    };
    Ok((report, args))
}

fn main() -> ExitCode {
    // The parser must not exit by itself: its usage-error code would
    // collide with the threshold-violation code in the exit contract.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
            // Help and version go to stdout, errors to stderr.
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };

    match execute(&cli.command) {
        Ok((report, args)) => {
            if !args.quiet {
                // A closed pipe (`dmk ... | head`) must not panic or change
                // the exit code; dropping the tail of the report there is
                // the conventional behaviour.
                let _ = writeln!(std::io::stdout(), "{}", report.to_json());
            }
            if report.passed() {
                ExitCode::from(EXIT_OK as u8)
            } else {
                for violation in &report.violations {
                    eprintln!("violation: {violation}");
                }
                ExitCode::from(EXIT_THRESHOLD as u8)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
