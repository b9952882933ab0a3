use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nastykd::acceptance;
use nastykd::distill::multi_peak_statistic;
use nastykd::experiment::{self, ExperimentConfig, Runner, SweepAxis, SweepValue, MULTI_PEAK_THRESHOLD};
use nastykd::models::Model;
use nastykd::Error;

#[derive(Parser)]
#[command(name = "nastykd", version, about = "Nasty-teacher knowledge-distillation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config.
    Run { config: PathBuf },
    /// Run a config once per value of one axis and write summary.csv.
    Sweep {
        config: PathBuf,
        /// omega, tau_s, alpha, fraction, adversary_arch or student_arch
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. 0,0.004,0.02 or tiny_cnn,mlp
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Write logits, softened probabilities and embeddings as CSV.
    DumpLogits {
        checkpoint: PathBuf,
        /// Dataset file, or digits:train / digits:test
        data: String,
        #[arg(long, default_value_t = 4.0)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the acceptance suite and print one line per criterion.
    Accept,
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

fn execute(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = Runner::new().run(&cfg, &stem(&config))?;
            println!("{}", dir.display());
        }
        Command::Sweep { config, axis, values } => {
            let cfg = ExperimentConfig::load(&config)?;
            let axis: SweepAxis = axis.parse()?;
            let values = values.iter().map(|v| SweepValue::parse(v)).collect();
            let name = format!("{}-{}", stem(&config), axis.as_str());
            let dir = Runner::new().sweep(&cfg, axis, values, &name)?;
            println!("{}", dir.join("summary.csv").display());
        }
        Command::DumpLogits { checkpoint, data, tau, out } => {
            let model = Model::load(&checkpoint)?;
            let data = experiment::load_dataset_for(&model, &data)?;
            let rows = experiment::dump_logits(&model, &data, tau, &out)?;
            let mp = multi_peak_statistic(&model, &data, tau, MULTI_PEAK_THRESHOLD)?;
            println!("{rows} rows written to {}; multi-peak({MULTI_PEAK_THRESHOLD}) = {mp:.4}", out.display());
        }
        Command::Accept => {
            let results = acceptance::run_all(&acceptance::Settings::default(), &mut std::io::stdout())?;
            return Ok(results.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::Config(_)) => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
