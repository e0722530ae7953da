//! End-to-end checks of the `pheno` binary: exit codes, error wording, and
//! the synth → run → plot flow.

use std::path::Path;
use std::process::{Command, Output};

fn pheno(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pheno"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn fast_run_args() -> Vec<&'static str> {
    vec![
        "--out_dir=out",
        "--labevents=out/synth/labevents.csv",
        "--diagnoses=out/synth/diagnoses_icd.csv",
        "--labitems=out/synth/d_labitems.csv",
        "--grid_amplitude2=1",
        "--grid_alpha=1",
        "--grid_tau=0.3,1",
        "--grid_noise2=0.05,0.1",
        "--pad_samples=4",
        "--patch_len=8",
        "--n_patches=100",
        "--n_eval_patches=50",
        "--ae_hidden=12",
        "--ae_epochs=10",
        "--tsne_perplexity=6",
        "--tsne_iterations=80",
        "--logistic_iterations=150",
        "--seed=9",
    ]
}

fn synth_args() -> Vec<&'static str> {
    vec![
        "synth",
        "--out_dir=out",
        "--synth_n_per_class=10",
        "--synth_min_samples=5",
        "--synth_max_samples=9",
        "--seed=9",
    ]
}

#[test]
fn synth_then_run_then_plot_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = pheno(dir.path(), &synth_args());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let mut args = vec!["run"];
    args.extend(fast_run_args());
    let out = pheno(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/metrics.txt").exists());

    let mut args = vec!["plot"];
    args.extend(fast_run_args());
    let out = pheno(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let plots = dir.path().join("out/plots");
    assert!(plots.join("encode1_signatures.svg").exists());
    assert!(plots.join("tsne_layer2.svg").exists());
}

#[test]
fn usage_error_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = pheno(dir.path(), &["no-such-subcommand"]);
    assert_eq!(out.status.code(), Some(1));
    let out = pheno(dir.path(), &["run", "--no_such_flag=1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_config_value_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = pheno(dir.path(), &["run", "--train_fraction=not-a-number"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train_fraction"));
}

#[test]
fn missing_input_exits_two_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = pheno(
        dir.path(),
        &["cohort", "--out_dir=out", "--labevents=nowhere/events.csv"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("nowhere/events.csv"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn plot_without_stage_outputs_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = pheno(dir.path(), &["plot", "--out_dir=empty_out"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("cohort_train.csv"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn stale_lock_is_reported_as_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("out")).unwrap();
    std::fs::write(dir.path().join("out/.pheno.lock"), b"").unwrap();
    let mut args = vec!["run"];
    args.extend(fast_run_args());
    let out = pheno(dir.path(), &args);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lock"));
}

#[test]
fn rerun_with_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = pheno(dir.path(), &synth_args());
    assert!(out.status.success());

    let mut args = vec!["run"];
    args.extend(fast_run_args());
    let out = pheno(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first = std::fs::read(dir.path().join("out/metrics.txt")).unwrap();

    // wipe everything except the synthetic inputs and run again
    for entry in std::fs::read_dir(dir.path().join("out")).unwrap() {
        let entry = entry.unwrap();
        if entry.file_name() != "synth" {
            if entry.file_type().unwrap().is_dir() {
                std::fs::remove_dir_all(entry.path()).unwrap();
            } else {
                std::fs::remove_file(entry.path()).unwrap();
            }
        }
    }
    let out = pheno(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let second = std::fs::read(dir.path().join("out/metrics.txt")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("config.txt"),
        "out_dir = from_file\nsynth_n_per_class = 3\nsynth_min_samples = 4\nsynth_max_samples = 6\n",
    )
    .unwrap();
    let out = pheno(
        dir.path(),
        &["synth", "--config", "config.txt", "--out_dir=from_flag"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("from_flag/synth/labevents.csv").exists());
    assert!(!dir.path().join("from_file").exists());
}
