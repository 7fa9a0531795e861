use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cltta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cltta"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn spec(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../specs")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn verify_fast_passes() {
    let out = cltta(&["verify", "--level", "fast"]);
    assert!(out.status.success(), "{}", stdout(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 5);
    assert!(!text.contains("cl-bound"));
}

#[test]
fn verify_full_runs_bound_check() {
    let out = cltta(&["verify", "--level", "full"]);
    assert!(out.status.success(), "{}", stdout(&out));
    assert!(stdout(&out).lines().any(|l| l.starts_with("PASS cl-bound")));
    assert!(!cltta(&["verify", "--level", "slow"]).status.success());
}

#[test]
fn train_then_adapt() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let trained = cltta(&["train-source", "--spec", &spec("default.toml"), "--out", path(&out)]);
    assert!(trained.status.success(), "{}", stderr(&trained));
    assert!(stdout(&trained).starts_with("train_accuracy="));
    assert!(out.join("source.ckpt").exists());

    let adapt = cltta(&["adapt", "--spec", &spec("default.toml"), "--out", path(&out)]);
    assert!(adapt.status.success(), "{}", stderr(&adapt));
    let report = fs::read(out.join("report.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&report).lines().count(), 23);

    let other = dir.path().join("other");
    let again = cltta(&[
        "adapt",
        "--spec",
        &spec("default.toml"),
        "--checkpoint",
        path(&out.join("source.ckpt")),
        "--out",
        path(&other),
    ]);
    assert!(again.status.success(), "{}", stderr(&again));
    assert_eq!(report, fs::read(other.join("report.csv")).unwrap());
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.ckpt");
    fs::write(&ckpt, b"CLTTACKP not really a checkpoint").unwrap();
    let out = cltta(&[
        "adapt",
        "--spec",
        &spec("default.toml"),
        "--checkpoint",
        path(&ckpt),
        "--out",
        path(dir.path()),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("format error"), "{}", stderr(&out));
}

#[test]
fn bad_specs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(spec("default.toml")).unwrap();
    let typo = dir.path().join("typo.toml");
    fs::write(&typo, text.replace("spread = 0.35", "spred = 0.35")).unwrap();
    let out = cltta(&["train-source", "--spec", path(&typo), "--out", path(dir.path())]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("spred"), "{}", stderr(&out));

    let unseeded = dir.path().join("unseeded.toml");
    fs::write(&unseeded, text.replacen("seed = 1\n", "", 1)).unwrap();
    assert!(
        !cltta(&["train-source", "--spec", path(&unseeded), "--out", path(dir.path())])
            .status
            .success()
    );

    let missing = dir.path().join("missing.toml");
    assert!(!cltta(&["train-source", "--spec", path(&missing)]).status.success());
}

#[test]
fn unwritable_output_fails() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let out = cltta(&[
        "train-source",
        "--spec",
        &spec("default.toml"),
        "--out",
        path(&blocker.join("sub")),
    ]);
    assert!(!out.status.success());
    assert!(
        stderr(&out).contains("cannot create output directory"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn demo_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(spec("default.toml"))
        .unwrap()
        .replace("replicates = 3", "replicates = 1");
    let small = dir.path().join("demo.toml");
    fs::write(&small, text).unwrap();
    let out = cltta(&["demo-cl", "--spec", path(&small), "--out", path(dir.path())]);
    assert!(out.status.success(), "{}", stderr(&out));
    let header = stdout(&out)
        .lines()
        .next()
        .unwrap()
        .split_whitespace()
        .map(String::from)
        .collect::<Vec<_>>();
    assert_eq!(header, ["replicate", "N=4", "N=6", "N=8", "baseline"]);
    assert!(dir.path().join("demo.csv").exists());
}
