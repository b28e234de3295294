//! Command-line runner: `spectralrank <experiment> --config <file> [key=value ...] --seed <u64> --out <path>`.
//!
//! Exits with 0 on success, 2 on a configuration error and 1 on any other failure.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::LazyLock;

use clap::Parser;
use spectralrank::harness::{run_experiment, schema_help, Experiment, ExperimentConfig, HarnessError};

static AFTER_HELP: LazyLock<String> = LazyLock::new(|| {
    format!(
        "Experiments and CSV columns (--trials N > 1 prepends trial,seed):\n{}\n\
         Config keys come from a flat JSON object; key=value overrides win over the file\n\
         and --seed wins over both. Values parse as JSON, falling back to strings.\n\
         A sidecar <out>.meta.json records the full config, seed, version and wall time.\n\n\
         Exit status: 0 success, 2 configuration error, 1 other failure.",
        schema_help()
    )
});

#[derive(Debug, Parser)]
#[command(name = "spectralrank", version, about = "Run a spectral-versus-Euclidean step experiment", after_help = AFTER_HELP.as_str())]
struct Cli {
    /// Experiment kind.
    experiment: String,
    /// Flat JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides of the form key=value.
    overrides: Vec<String>,
    /// Seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path of the CSV or JSON table.
    #[arg(long)]
    out: PathBuf,
    /// Independent trials with derived seeds; overrides the config's `trials`.
    #[arg(long)]
    trials: Option<usize>,
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let experiment: Experiment = cli.experiment.parse()?;
    let mut overrides = cli.overrides;
    if let Some(t) = cli.trials {
        overrides.push(format!("trials={t}"));
    }
    let cfg = ExperimentConfig::load(experiment, cli.config.as_deref(), &overrides, cli.seed)?;
    let report = run_experiment(&cfg, &cli.out)?;
    eprintln!(
        "{}: wrote {} rows to {} (sidecar {})",
        experiment,
        report.table.rows.len(),
        report.output.display(),
        report.sidecar.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
