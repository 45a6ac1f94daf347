mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Feedback stabilization of the nonisothermal Cahn–Hilliard system.
#[derive(Parser, Debug)]
#[command(name = "chstab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Source {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Built-in experiment, e.g. paper-reference or m2-lambda1000.
    #[arg(long, value_name = "NAME")]
    pub preset: Option<String>,
    /// Use the 150x150 grid and dt = 5e-5 for presets.
    #[arg(long)]
    pub paper_scale: bool,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one configuration and write its record.
    Simulate {
        #[command(flatten)]
        source: Source,
    },
    /// Run a grid of actuator levels and gains against one reference.
    Sweep {
        #[command(flatten)]
        source: Source,
        /// Comma-separated actuator levels.
        #[arg(long, value_delimiter = ',', default_value = "2")]
        levels: Vec<usize>,
        /// Comma-separated gains; lambda1 = lambda2 = each value.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        lambdas: Vec<f64>,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the self-check suite.
    Verify {
        #[arg(long, value_enum, default_value_t = VerifyLevel::Fast)]
        level: VerifyLevel,
        /// Tamper with the gains; the suite must then fail.
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
    },
    /// Render SVG plots from a run directory, a sweep directory or a layout file.
    Plot {
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Print the TOML of a preset.
    Preset {
        name: String,
        #[arg(long)]
        paper_scale: bool,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum VerifyLevel {
    Fast,
    Full,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum FaultArg {
    SignFlip,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { source } => commands::simulate(&source),
        Command::Sweep {
            source,
            levels,
            lambdas,
            jobs,
        } => {
            if levels.is_empty() || lambdas.is_empty() || jobs == 0 {
                eprintln!("error: --levels and --lambdas need at least one value and --jobs must be positive");
                return ExitCode::from(2);
            }
            commands::sweep(&source, &levels, &lambdas, jobs)
        }
        Command::Verify {
            level,
            inject_fault,
        } => {
            let level = match level {
                VerifyLevel::Fast => chstab::verify::Level::Fast,
                VerifyLevel::Full => chstab::verify::Level::Full,
            };
            let fault = inject_fault.map(|FaultArg::SignFlip| chstab::verify::Fault::SignFlip);
            commands::verify(level, fault)
        }
        Command::Plot { input, out } => commands::plot(&input, out.as_deref()),
        Command::Preset { name, paper_scale } => commands::print_preset(&name, paper_scale),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
