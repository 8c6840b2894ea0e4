//! The `hilearn` binary: exit codes and a small end-to-end run through
//! every subcommand.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TOY: &str = "../../configs/toy.toml";

fn hilearn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hilearn"))
        .args(args)
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .expect("binary runs")
}

fn code(args: &[&str]) -> i32 {
    hilearn(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&[]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["eval", "--episodes", "many"]), 2);
    assert_eq!(code(&["label", "--beam", "0"]), 2);
    assert_eq!(code(&["label", "--exact", "--beam", "4"]), 2);
    assert_eq!(code(&["gen-demos", "--family", "origami"]), 2);
}

#[test]
fn help_exits_0() {
    let out = hilearn(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("pipeline"));
}

#[test]
fn validation_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    // no output directory
    assert_eq!(code(&["gen-demos", "--count", "1"]), 3);
    assert_eq!(code(&["gen-demos", "--config", "/nonexistent/run.toml"]), 3);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\niters = 3\n").unwrap();
    assert_eq!(code(&["gen-demos", "--config", p(&bad), "--out", p(dir.path())]), 3);
    let range = dir.path().join("range.toml");
    fs::write(&range, "[policy]\ngamma = 1.5\n").unwrap();
    assert_eq!(code(&["gen-demos", "--config", p(&range), "--out", p(dir.path())]), 3);
    assert_eq!(code(&["eval", "--checkpoint", "/nonexistent/ckpt", "--out", p(dir.path())]), 3);
    let garbage = dir.path().join("garbage.txt");
    fs::write(&garbage, "this is not a demonstration\n").unwrap();
    assert_eq!(code(&["label", "--demos", p(&garbage), "--out", p(dir.path())]), 3);
    // training needs labels
    let demos = dir.path().join("demos");
    assert_eq!(code(&["gen-demos", "--config", TOY, "--count", "1", "--out", p(&demos)]), 0);
    let stripped = dir.path().join("stripped.txt");
    let file = fs::read_dir(&demos).unwrap().next().unwrap().unwrap().path();
    let text: String = fs::read_to_string(file)
        .unwrap()
        .lines()
        .map(|l| l.split(" gt=").next().unwrap().to_string() + "\n")
        .collect();
    fs::write(&stripped, text).unwrap();
    assert_eq!(code(&["train", "--config", TOY, "--demos", p(&stripped), "--out", p(dir.path())]), 3);
}

#[test]
fn runtime_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    fs::write(&file, "").unwrap();
    // the output directory would have to live under a regular file
    let out = file.join("demos");
    assert_eq!(code(&["gen-demos", "--config", TOY, "--count", "1", "--out", p(&out)]), 4);
}

#[test]
fn subcommands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let demos = dir.path().join("demos");
    let labeled = dir.path().join("labeled");
    let trained = dir.path().join("trained");
    let eval = dir.path().join("eval");
    let out = hilearn(&["gen-demos", "--config", TOY, "--count", "3", "--seed", "5", "--out", p(&demos)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_dir(&demos).unwrap().count(), 3);

    assert_eq!(code(&["label", "--config", TOY, "--demos", p(&demos), "--exact", "--stride", "2", "--out", p(&labeled)]), 0);
    assert!(labeled.join("label_report.txt").exists());
    let first = fs::read_dir(&labeled)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_str().unwrap().starts_with("labeled"))
        .unwrap();
    assert!(fs::read_to_string(first).unwrap().contains(" pl="));

    assert_eq!(code(&["train", "--config", TOY, "--demos", p(&labeled), "--out", p(&trained)]), 0);
    let ckpt = trained.join("checkpoint");
    assert!(ckpt.exists());
    assert!(trained.join("loss_curve.csv").exists());

    assert_eq!(code(&["label", "--config", TOY, "--demos", p(&demos), "--checkpoint", p(&ckpt), "--beam", "8", "--out", p(&labeled)]), 0);
    assert_eq!(code(&["eval", "--config", TOY, "--checkpoint", p(&ckpt), "--episodes", "1", "--out", p(&eval)]), 0);
    let report = fs::read_to_string(eval.join("eval_report.txt")).unwrap();
    assert!(report.contains("aggregate mean_success="));
    // a checkpoint for four objects cannot drive the seven-object tire task
    assert_eq!(code(&["eval", "--config", TOY, "--family", "tire", "--checkpoint", p(&ckpt), "--out", p(&eval)]), 3);
}

#[test]
fn pipeline_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(code(&["pipeline", "--config", TOY, "--out", p(&out)]), 0);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("config_sha256 "));
    assert!(manifest.contains("eval_report.txt"));
    assert!(manifest.contains("unhashed logs/"));
}
