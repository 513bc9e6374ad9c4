use std::io::Write;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use filippov_cli::{
    cmd_check, cmd_ess_range, cmd_filippov_set, cmd_solve, cmd_verify, tabular, trajectory_csv, CliError, Options,
    Outcome, EXIT_IO,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Structured,
    Tabular,
}

#[derive(Debug, Parser)]
#[command(name = "filippov", version, about = "Essential ranges, Filippov sets and sliding-mode solutions from a TOML problem file")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Debug, Args)]
struct Global {
    /// Seed for all sampling; beats the file's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Seed used when neither --seed nor the file sets one.
    #[arg(long, global = true, env = "FILIPPOV_SEED", hide_env_values = true)]
    default_seed: Option<u64>,
    #[arg(long, global = true)]
    rtol: Option<f64>,
    #[arg(long, global = true)]
    atol: Option<f64>,
    #[arg(long, global = true)]
    event_tol: Option<f64>,
    /// Hull tolerance h for Filippov sets.
    #[arg(long, global = true)]
    hull_tol: Option<f64>,
    /// Cover box width for essential ranges.
    #[arg(long, global = true)]
    resolution: Option<f64>,
    /// Named query block to use.
    #[arg(long, global = true)]
    query: Option<String>,
    #[arg(long, global = true, value_enum, default_value = "structured")]
    format: Format,
    /// Print nothing on success; errors still go to stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and validate a problem file.
    Check { problem: String },
    /// Essential range of the map over a query region.
    EssRange { problem: String },
    /// Filippov set at a point.
    FilippovSet {
        problem: String,
        #[arg(long)]
        t: Option<f64>,
        /// Comma-separated state, e.g. `--x 0,0.5`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x: Option<Vec<f64>>,
        /// Use the shrinking-ball construction instead of adjacent branch values.
        #[arg(long)]
        generic: bool,
    },
    /// Integrate the [ivp] block.
    Solve {
        problem: String,
        /// Also write the trajectory here (JSON, or CSV with --format tabular).
        #[arg(long, short)]
        out: Option<String>,
    },
    /// Check a trajectory file against the problem's Filippov map.
    Verify {
        problem: String,
        trajectory: String,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
    },
}

fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let g = &cli.global;
    let opts = Options {
        seed: g.seed,
        default_seed: g.default_seed,
        rtol: g.rtol,
        atol: g.atol,
        event_tol: g.event_tol,
        hull_tol: g.hull_tol,
        resolution: g.resolution,
        query: g.query.clone(),
    };
    match &cli.command {
        Command::Check { problem } => cmd_check(problem, &opts),
        Command::EssRange { problem } => cmd_ess_range(problem, &opts),
        Command::FilippovSet {
            problem,
            t,
            x,
            generic,
        } => cmd_filippov_set(problem, &opts, *t, x.clone(), *generic),
        Command::Solve { problem, out } => {
            let outcome = cmd_solve(problem, &opts)?;
            if let (Some(path), Some(tr)) = (out, &outcome.trajectory) {
                let text = match g.format {
                    Format::Structured => serde_json::to_string_pretty(tr).expect("trajectories serialize"),
                    Format::Tabular => trajectory_csv(tr),
                };
                std::fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write {path}: {e}")))?;
            }
            Ok(outcome)
        }
        Command::Verify {
            problem,
            trajectory,
            samples,
            tol,
        } => cmd_verify(problem, trajectory, &opts, *samples, *tol),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            if !cli.global.quiet {
                let text = match cli.global.format {
                    Format::Structured => serde_json::to_string_pretty(&outcome.report).expect("reports serialize") + "\n",
                    Format::Tabular => match &outcome.trajectory {
                        Some(tr) => trajectory_csv(tr),
                        None => tabular(&outcome.report),
                    },
                };
                if std::io::stdout().write_all(text.as_bytes()).is_err() {
                    return ExitCode::from(EXIT_IO as u8);
                }
                for w in &outcome.report.warnings {
                    eprintln!("warning: {w}");
                }
            }
            ExitCode::from(outcome.exit as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
