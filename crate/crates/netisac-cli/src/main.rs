use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use netisac::error::Error;
use netisac::harness::{
    self, beamform_reports, run_experiment, sweep, theory_report, write_curves_csv,
    write_sweep_csv, ExperimentConfig, SweepAxis,
};

/// Networked sensing/communication experiment runner.
#[derive(Parser)]
#[command(name = "netisac", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured estimator variants and export learning curves.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print stability and steady-state error predictions as JSON.
    Theory {
        #[arg(long)]
        config: PathBuf,
    },
    /// Jointly design the sensing and data beams for each priority value.
    Beamform {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sweep one scenario axis and export steady-state figures.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Axis to vary: L (targets), N (users), K (pixels), SNR (dB).
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Parameter(_) | Error::Dimension(_) | Error::Json(_) => 2,
        Error::Numerical(_)
        | Error::Stability(_)
        | Error::Divergence { .. }
        | Error::DegenerateEstimate(_) => 3,
        _ => 1,
    }
}

fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn run(cli: Cli) -> netisac::Result<()> {
    harness::init_threads_from_env();
    match cli.command {
        Command::Simulate { config } => {
            let cfg = ExperimentConfig::from_json_file(&config)?;
            let res = run_experiment(&cfg)?;
            let dir = output_dir(&cfg);
            std::fs::create_dir_all(&dir)?;
            let mut file = std::fs::File::create(dir.join("curves.csv"))?;
            write_curves_csv(&res.rows, &mut file)?;
            let summary = serde_json::to_string_pretty(&res.summary)?;
            std::fs::write(dir.join("summary.json"), &summary)?;
            println!("{summary}");
        }
        Command::Theory { config } => {
            let cfg = ExperimentConfig::from_json_file(&config)?;
            let report = theory_report(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Beamform { config } => {
            let cfg = ExperimentConfig::from_json_file(&config)?;
            let reports = beamform_reports(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&reports)?);
        }
        Command::Sweep {
            config,
            axis,
            values,
        } => {
            let cfg = ExperimentConfig::from_json_file(&config)?;
            let axis: SweepAxis = axis.parse()?;
            let rows = sweep(&cfg, axis, &values)?;
            let dir = output_dir(&cfg);
            std::fs::create_dir_all(&dir)?;
            let mut file = std::fs::File::create(dir.join("sweep.csv"))?;
            write_sweep_csv(&rows, &mut file)?;
            println!("wrote {} rows to {}", rows.len(), dir.join("sweep.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
