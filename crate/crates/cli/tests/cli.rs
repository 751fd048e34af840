use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mflow")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, format!("out = {:?}\n{body}", dir.display().to_string())).unwrap();
    path
}

fn small_run(dir: &Path) -> String {
    write_config(dir, "seed = 3\n[data]\ncount = 10\n[train]\nsteps = 8\nbatch_size = 4\ncheckpoint_every = 4\n").display().to_string()
}

fn data_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir.join("data")).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn synth_writes_pairs_and_manifest_idempotently() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path());
    let out = mflow(&["--config", &cfg, "synth"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let files = data_files(dir.path());
    assert_eq!(files.iter().filter(|p| p.extension().is_some_and(|e| e == "mfld")).count(), 20);
    assert!(files.iter().any(|p| p.ends_with("manifest.tsv")));
    let first: Vec<Vec<u8>> = files.iter().map(|p| fs::read(p).unwrap()).collect();

    assert!(mflow(&["--config", &cfg, "synth"]).status.success());
    assert_eq!(data_files(dir.path()), files);
    let second: Vec<Vec<u8>> = files.iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(first, second);
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nstepz = 4\n");
    let out = mflow(&["--config", cfg.to_str().unwrap(), "synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.stepz"));
}

#[test]
fn evaluating_targets_against_themselves_gives_full_dominance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path());
    assert!(mflow(&["--config", &cfg, "synth"]).status.success());
    let targets: Vec<String> =
        data_files(dir.path()).iter().filter(|p| p.to_string_lossy().ends_with("_tgt.mfld")).map(|p| p.display().to_string()).collect();
    let mut args = vec!["--config", &cfg, "eval", "--inputs"];
    args.extend(targets.iter().map(String::as_str));
    args.push("--references");
    args.extend(targets.iter().map(String::as_str));
    let out = mflow(&args);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(stdout.contains("dominance 1.000"), "{stdout}");
    assert!(stdout.contains("mean reconstruction error 0.000000"), "{stdout}");
}

#[test]
fn check_passes_and_injected_fault_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let out = mflow(&["--out", out_dir, "check"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(!stdout.contains("FAIL"));

    let out = mflow(&["--out", out_dir, "check", "--inject-fault"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL log-det Coupling"));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (cfg_a, cfg_b) = (small_run(a.path()), small_run(b.path()));
    for cfg in [&cfg_a, &cfg_b] {
        assert!(mflow(&["--config", cfg, "synth"]).status.success());
    }
    assert!(mflow(&["--config", &cfg_a, "train"]).status.success());

    let half = b.path().join("half.toml");
    fs::write(&half, format!("out = {:?}\nseed = 3\n[data]\ncount = 10\n[train]\nsteps = 4\nbatch_size = 4\ncheckpoint_every = 4\n", b.path().display().to_string())).unwrap();
    assert!(mflow(&["--config", half.to_str().unwrap(), "train"]).status.success());
    let ck = b.path().join("checkpoint.mfck");
    let out = mflow(&["--config", &cfg_b, "train", "--resume", ck.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(fs::read(a.path().join("checkpoint.mfck")).unwrap(), fs::read(&ck).unwrap());
    assert_eq!(fs::read(a.path().join("metrics.tsv")).unwrap(), fs::read(b.path().join("metrics.tsv")).unwrap());
}

#[test]
fn missing_config_file_is_an_io_error() {
    let out = mflow(&["--config", "/nonexistent/run.toml", "synth"]);
    assert_eq!(out.status.code(), Some(1));
}
