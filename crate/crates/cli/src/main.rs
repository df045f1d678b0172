use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use synadc::system::CalibrationState;
use synadc_cli::config::output_dir;
use synadc_cli::{run_experiment, write_artifacts, CliError, Experiment, RunConfig};

/// Runs one converter-model experiment and writes its CSV/JSON artifacts.
#[derive(Parser, Debug)]
#[command(name = "synadc", version)]
struct Args {
    /// slice-transfer | adc-sine | pi-sweep | pi-trim | montecarlo | calibrate | fom
    experiment: String,
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to the config's output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Calibration file written by `calibrate`, for adc-sine and fom.
    #[arg(long)]
    calibration: Option<PathBuf>,
}

fn run(args: &Args) -> Result<Vec<String>, CliError> {
    let exp: Experiment = args.experiment.parse()?;
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    let cal = match &args.calibration {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            Some(CalibrationState::from_json(&text).map_err(|e| CliError::Config(e.to_string()))?)
        }
        None => None,
    };
    let artifacts = run_experiment(exp, &cfg, cal.as_ref())?;
    let dir = output_dir(&cfg, args.out.as_deref());
    write_artifacts(&dir, &artifacts)?;
    Ok(artifacts
        .iter()
        .map(|a| dir.join(&a.name).display().to_string())
        .collect())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(files) => {
            for f in files {
                println!("{f}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("synadc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
