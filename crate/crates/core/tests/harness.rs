use std::fs;
use std::path::PathBuf;

use cltta::checkpoint::Checkpoint;
use cltta::harness::{
    cmd_adapt, cmd_demo_cl, cmd_train_source, cmd_verify, read_report, source_data, ExperimentSpec, ScenarioSpec,
    MEAN_ROW,
};
use cltta::netcore::accuracy;
use cltta::verify::Level;
use cltta::Error;

fn spec_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../specs").join(name)
}

fn default_spec() -> ExperimentSpec {
    ExperimentSpec::load(&spec_path("default.toml")).unwrap()
}

#[test]
fn shipped_specs_parse() {
    for entry in fs::read_dir(spec_path("")).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ExperimentSpec::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        }
    }
    let spec = default_spec();
    assert_eq!(spec.scenario, ScenarioSpec::DefaultSuite);
    assert_eq!(spec.adapt.len(), 2);
}

#[test]
fn train_source_round_trip_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let spec = default_spec();
    let a = cmd_train_source(&spec, &dir.path().join("a")).unwrap();
    let b = cmd_train_source(&spec, &dir.path().join("b")).unwrap();
    assert!(a.summary_line().starts_with("train_accuracy="));
    let bytes_a = fs::read(&a.checkpoint).unwrap();
    assert_eq!(bytes_a, fs::read(&b.checkpoint).unwrap());

    let model = Checkpoint::load(&a.checkpoint).unwrap().model;
    let (_, test) = source_data(&spec).unwrap();
    assert_eq!(accuracy(&model, &test).unwrap(), a.summary.test_accuracy.unwrap());

    let mut corrupted = bytes_a.clone();
    let mid = corrupted.len() / 2;
    corrupted[mid] ^= 0x40;
    fs::write(&a.checkpoint, &corrupted).unwrap();
    assert!(matches!(Checkpoint::load(&a.checkpoint), Err(Error::Format(_))));
    fs::write(&a.checkpoint, &bytes_a[..bytes_a.len() - 5]).unwrap();
    assert!(matches!(Checkpoint::load(&a.checkpoint), Err(Error::Format(_))));
}

#[test]
fn unwritable_output_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    assert!(cmd_train_source(&default_spec(), &blocker.join("out")).is_err());
}

#[test]
fn adapt_report_layout_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let spec = default_spec();
    let trained = cmd_train_source(&spec, dir.path()).unwrap();
    let first = cmd_adapt(&spec, &trained.checkpoint, &dir.path().join("r1")).unwrap();
    let second = cmd_adapt(&spec, &trained.checkpoint, &dir.path().join("r2")).unwrap();
    assert_eq!(first.rows.len(), 22);
    assert_eq!(fs::read(&first.report).unwrap(), fs::read(&second.report).unwrap());
    assert_eq!(read_report(&first.report).unwrap(), first.rows);

    let text = fs::read_to_string(&first.report).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "config_id,corruption,severity,accuracy,mean_threshold,batches,seed"
    );
    let means: Vec<_> = first.rows.iter().filter(|r| r.corruption == MEAN_ROW).collect();
    assert_eq!(means.len(), 2);
    assert_eq!(means[0].config_id, "source");
    assert!(means[0].mean_threshold.is_none());
    assert!(means[1].mean_threshold.is_some());
    assert!(means[1].accuracy > means[0].accuracy, "{means:?}");
    assert_eq!(first.rows[10], *means[0]);
}

#[test]
fn adapt_rejects_dimension_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let spec = default_spec();
    let trained = cmd_train_source(&spec, dir.path()).unwrap();
    let mut other = spec.clone();
    other.model.dims = vec![20, 32, 10];
    let err = cmd_adapt(&other, &trained.checkpoint, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(cmd_adapt(&spec, &dir.path().join("missing.ckpt"), dir.path()).is_err());
}

#[test]
fn demo_table_shape_and_shared_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = default_spec();
    let demo = spec.demo.as_mut().unwrap();
    demo.replicates = 1;
    demo.epochs = 2;
    let table = cmd_demo_cl(&spec, dir.path()).unwrap();
    assert_eq!(table.columns(), ["N=4", "N=6", "N=8", "baseline"]);
    assert_eq!(table.rows.len(), 1);
    let trained = cmd_train_source(&spec, dir.path()).unwrap();
    assert_eq!(table.rows[0].baseline, trained.summary.test_accuracy.unwrap());
    let csv = fs::read_to_string(dir.path().join("demo.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("replicate,N=4,N=6,N=8,baseline"));
    assert_eq!(csv.lines().count(), 3);

    let mut bare = spec.clone();
    bare.demo = None;
    assert!(cmd_demo_cl(&bare, dir.path()).is_err());
}

#[test]
fn verify_levels() {
    let fast = cmd_verify(Level::Fast);
    assert!(fast.passed(), "{fast}");
    assert_eq!(fast.checks.len(), 5);
    let full = cmd_verify(Level::Full);
    assert!(full.passed(), "{full}");
    assert!(full.checks.iter().any(|c| c.name == "cl-bound"));
}
