use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cltta::harness::{self, ExperimentSpec, CHECKPOINT_FILE};
use cltta::verify::Level;

/// Complementary-label test-time adaptation experiments.
#[derive(Parser)]
#[command(name = "cltta", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model and write a checkpoint.
    TrainSource {
        #[arg(long)]
        spec: PathBuf,
        /// Output directory; defaults to the spec's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapt a trained checkpoint over the spec's scenario and write report.csv.
    Adapt {
        #[arg(long)]
        spec: PathBuf,
        /// Source checkpoint; defaults to source.ckpt in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train from known complementary labels and print the accuracy table.
    DemoCl {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle suites.
    Verify {
        #[arg(long, value_enum, default_value_t = LevelArg::Fast)]
        level: LevelArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Fast,
    Full,
}

fn load(spec: &Path, out: Option<PathBuf>) -> Result<(ExperimentSpec, PathBuf)> {
    let spec = ExperimentSpec::load(spec)?;
    let out = out.unwrap_or_else(|| spec.out_dir.clone());
    Ok((spec, out))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::TrainSource { spec, out } => {
            let (spec, out) = load(&spec, out)?;
            let result = harness::cmd_train_source(&spec, &out).context("train-source failed")?;
            println!("{}", result.summary_line());
        }
        Command::Adapt { spec, checkpoint, out } => {
            let (spec, out) = load(&spec, out)?;
            let checkpoint = checkpoint.unwrap_or_else(|| out.join(CHECKPOINT_FILE));
            let result = harness::cmd_adapt(&spec, &checkpoint, &out).context("adapt failed")?;
            for row in result.rows.iter().filter(|r| r.corruption == harness::MEAN_ROW) {
                println!("{:<16} mean accuracy {:.4}", row.config_id, row.accuracy);
            }
            println!("wrote {}", result.report.display());
        }
        Command::DemoCl { spec, out } => {
            let (spec, out) = load(&spec, out)?;
            let table = harness::cmd_demo_cl(&spec, &out).context("demo-cl failed")?;
            print!("{table}");
        }
        Command::Verify { level } => {
            let level = match level {
                LevelArg::Fast => Level::Fast,
                LevelArg::Full => Level::Full,
            };
            let report = harness::cmd_verify(level);
            println!("{report}");
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
