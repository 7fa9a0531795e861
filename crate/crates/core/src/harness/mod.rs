//! Experiment commands behind the command-line front end.
//!
//! Every command is a pure function of its spec file and checkpoint inputs.
//! Output files are written atomically and rows are in canonical order, so
//! reruns produce byte-identical files.

mod report;
mod spec;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

pub use report::{
    read_report, report_rows, round_sig, rows_from_csv, rows_to_csv, write_report, DemoRow, DemoTable, ReportRow,
    MEAN_ROW, REPORT_HEADER,
};
pub use spec::{DemoSpec, ExperimentSpec, ModelSpec, ScenarioSpec, SourceSpec, SCHEMA_VERSION};

use crate::adapt::{run_scenario, RunReport};
use crate::checkpoint::{write_atomic, Checkpoint};
use crate::error::{Error, Result};
use crate::netcore::{train_source, train_with_known_cl, KnownClConfig, MlpModel, TrainSummary};
use crate::scenarios::{make_source, Dataset};
use crate::verify::{self, Level, VerifyReport};

pub const CHECKPOINT_FILE: &str = "source.ckpt";
pub const REPORT_FILE: &str = "report.csv";
pub const DEMO_FILE: &str = "demo.csv";
/// Seed of the verification suite.
pub const VERIFY_SEED: u64 = 2_718_281;

/// Train and test splits described by the spec.
pub fn source_data(spec: &ExperimentSpec) -> Result<(Dataset, Dataset)> {
    let s = &spec.source;
    make_source(s.classes, s.dim, s.per_class, s.spread, s.seed)
}

/// Builds and trains the source model.
pub fn train_source_model(spec: &ExperimentSpec) -> Result<(MlpModel, TrainSummary)> {
    let (train, test) = source_data(spec)?;
    let mut model = MlpModel::new(&spec.model.dims, spec.model.seed)?;
    let summary = train_source(&mut model, &train, Some(&test), &spec.training)?;
    Ok((model, summary))
}

#[derive(Clone, Debug)]
pub struct TrainSourceOutput {
    pub checkpoint: PathBuf,
    pub summary: TrainSummary,
}

impl TrainSourceOutput {
    pub fn summary_line(&self) -> String {
        format!(
            "train_accuracy={:.4} test_accuracy={:.4} checkpoint={}",
            self.summary.train_accuracy,
            self.summary.test_accuracy.unwrap_or(f64::NAN),
            self.checkpoint.display()
        )
    }
}

fn ensure_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", out.display())))
}

/// Trains the source model and writes `source.ckpt` under `out`.
pub fn cmd_train_source(spec: &ExperimentSpec, out: &Path) -> Result<TrainSourceOutput> {
    ensure_dir(out)?;
    let (model, summary) = train_source_model(spec)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    Checkpoint::new(model).save(&checkpoint)?;
    Ok(TrainSourceOutput { checkpoint, summary })
}

#[derive(Clone, Debug)]
pub struct AdaptOutput {
    pub report: PathBuf,
    pub rows: Vec<ReportRow>,
    pub runs: Vec<RunReport>,
}

/// Runs every adaptation config over the spec's scenario and writes `report.csv`.
///
/// Streams are drawn from the regenerated source test split.
pub fn cmd_adapt(spec: &ExperimentSpec, checkpoint: &Path, out: &Path) -> Result<AdaptOutput> {
    let model = Checkpoint::load(checkpoint)?.model;
    if model.dims() != spec.model.dims.as_slice() {
        return Err(Error::Config(format!(
            "checkpoint dims {:?} do not match spec model.dims {:?}",
            model.dims(),
            spec.model.dims
        )));
    }
    ensure_dir(out)?;
    let (_, pool) = source_data(spec)?;
    let scenario = spec.scenario.corruptions();
    let runs = spec
        .adapt
        .par_iter()
        .map(|cfg| run_scenario(cfg, &model, &scenario, &pool))
        .collect::<Result<Vec<_>>>()?;
    let rows = report_rows(&runs);
    let report = out.join(REPORT_FILE);
    write_report(&report, &rows)?;
    Ok(AdaptOutput { report, rows, runs })
}

/// Trains from known complementary labels for each negative count, plus the
/// supervised baseline, and writes `demo.csv`.
pub fn cmd_demo_cl(spec: &ExperimentSpec, out: &Path) -> Result<DemoTable> {
    let demo = spec
        .demo
        .as_ref()
        .ok_or_else(|| Error::Config("spec has no [demo] section".into()))?;
    ensure_dir(out)?;
    let jobs: Vec<(usize, Option<usize>)> = (0..demo.replicates)
        .flat_map(|r| {
            demo.negatives
                .iter()
                .map(move |&n| (r, Some(n)))
                .chain(std::iter::once((r, None)))
        })
        .collect();
    let accuracies = jobs
        .par_iter()
        .map(|&(r, n)| {
            let spec = spec.reseeded(r as u64);
            let summary = match n {
                None => train_source_model(&spec)?.1,
                Some(n) => {
                    let (train, test) = source_data(&spec)?;
                    let mut model = MlpModel::new(&spec.model.dims, spec.model.seed)?;
                    let cfg = KnownClConfig {
                        n_negatives: n,
                        epochs: demo.epochs,
                        lr: demo.lr,
                        batch_size: demo.batch_size,
                        seed: spec.training.seed,
                    };
                    train_with_known_cl(&mut model, &train, Some(&test), &cfg)?
                }
            };
            Ok(summary.test_accuracy.expect("test split supplied"))
        })
        .collect::<Result<Vec<f64>>>()?;
    let width = demo.negatives.len() + 1;
    let rows = accuracies
        .chunks(width)
        .enumerate()
        .map(|(replicate, chunk)| DemoRow {
            replicate,
            accuracies: chunk[..width - 1].to_vec(),
            baseline: chunk[width - 1],
        })
        .collect();
    let table = DemoTable {
        negatives: demo.negatives.clone(),
        rows,
    };
    write_atomic(&out.join(DEMO_FILE), &table.to_csv()?)?;
    Ok(table)
}

/// Runs the oracle suite.
pub fn cmd_verify(level: Level) -> VerifyReport {
    verify::run(level, VERIFY_SEED)
}
