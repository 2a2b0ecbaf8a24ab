//! Command-line front end: `analyze`, `run`, `diagnose`, `plotdata`.
//!
//! Exit codes: 0 on success, 1 on validation failures, 2 on runtime
//! failures (I/O, solver breakdown).

use clap::{Parser, Subcommand};
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

use odesa::experiments::{
    check_assumptions, diagnose, emit_plot_data, gtd_etd_td_reports, run_experiment,
    AssumptionReport, EnvironmentSpec, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "odesa", version, about = "Off-policy TD testbed and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assumption checklist and spectral reports for an environment bundle.
    Analyze {
        /// `builtin:<name>` (divergence_star, random_offpolicy,
        /// tabular_chain) or a problem JSON file path.
        #[arg(long)]
        environment: String,
        /// Seed for seeded builtin environments.
        #[arg(long, default_value_t = 0)]
        env_seed: u64,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        /// Learning-rate scale B1 checked against the admissible family.
        #[arg(long, default_value_t = 1.0)]
        b1: f64,
        #[arg(long, default_value_t = 1.0)]
        b2: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute a batch experiment from a config JSON file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rate-of-change, running-mean, stability, and discretization-error
    /// diagnostics over a finished artifact directory.
    Diagnose {
        #[arg(long)]
        artifacts: PathBuf,
        /// Half-width of the rate-of-change window on the learning-rate clock.
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        /// Window length of the discretization-error segments.
        #[arg(long, default_value_t = 1.0)]
        window: f64,
    },
    /// Emit a long-format plot CSV (seed, step, series, value).
    Plotdata {
        #[arg(long)]
        artifacts: PathBuf,
        /// Output file; defaults to plot_data.csv inside the artifacts.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct AnalyzeReport {
    environment: String,
    lambda: f64,
    assumptions: AssumptionReport,
    spectral: odesa::experiments::BundleReports,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> odesa::Result<()> {
    match cli.command {
        Command::Analyze { environment, env_seed, lambda, b1, b2, beta, out } => {
            let spec = EnvironmentSpec::parse(&environment, env_seed);
            let bundle = spec.load()?;
            let assumptions = check_assumptions(&bundle, lambda, (b1, b2, beta));
            let spectral = gtd_etd_td_reports(&bundle, lambda)?;
            let report = AnalyzeReport {
                environment: bundle.label.clone(),
                lambda,
                assumptions,
                spectral,
            };
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => std::fs::write(path, text + "\n")?,
                None => println!("{text}"),
            }
            if !report.assumptions.all_passed {
                // Surface failed checks in the exit code for scripting.
                return Err(odesa::Error::InvalidConfig(
                    "assumption checklist has failures (see report)".into(),
                ));
            }
            Ok(())
        }
        Command::Run { config } => {
            let text = std::fs::read_to_string(&config)?;
            let config = ExperimentConfig::from_json(&text)?;
            let out = run_experiment(&config)?;
            println!("artifacts written to {}", out.display());
            Ok(())
        }
        Command::Diagnose { artifacts, tau, window } => {
            let summary = diagnose(&artifacts, tau, window)?;
            println!(
                "diagnostics written for {} seed(s) (tau {}, window {})",
                summary.seeds.len(),
                summary.tau,
                summary.window
            );
            Ok(())
        }
        Command::Plotdata { artifacts, out } => {
            let out = out.unwrap_or_else(|| artifacts.join("plot_data.csv"));
            let path = emit_plot_data(&artifacts, &out)?;
            println!("plot data written to {}", path.display());
            Ok(())
        }
    }
}
