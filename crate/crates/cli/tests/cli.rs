use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 2
run_dir = "run"

[input]
kind = "sim"
scenes = ["corridor"]

[input.corpus]
route_trajectories = 4
goal_trajectories = 8

[benchmark]
baselines = false

[benchmark.eval]
episodes_per_task = 1
"#;

fn cfnav(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfnav"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_then_rerun_is_cached_and_inspectable() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfnav.toml"), SMALL).unwrap();
    let first = cfnav(dir.path(), &["--config", "cfnav.toml", "run"]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stdout(&first).contains("augment       Executed"), "{}", stdout(&first));
    assert!(stdout(&first).contains("cast"), "{}", stdout(&first));

    let second = cfnav(dir.path(), &["--config", "cfnav.toml", "run"]);
    assert!(second.status.success());
    assert!(!stdout(&second).contains("Executed"), "{}", stdout(&second));

    let forced = cfnav(dir.path(), &["--config", "cfnav.toml", "--force", "diagnose"]);
    assert!(stdout(&forced).contains("diagnose: Executed"), "{}", stdout(&forced));

    let shown = cfnav(dir.path(), &["inspect", "run/dataset.jsonl"]);
    assert!(shown.status.success());
    assert!(stdout(&shown).contains("cfnav.labeled_dataset v1"), "{}", stdout(&shown));

    let eval = cfnav(
        dir.path(),
        &["--config", "cfnav.toml", "evaluate", "--policy", "random", "--episodes", "1", "--out", "eval.json"],
    );
    assert!(eval.status.success(), "{}", stderr(&eval));
    assert!(stdout(&eval).contains("random"));
    assert!(dir.path().join("eval.json").exists());
}

#[test]
fn stage_without_inputs_fails_with_a_named_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = cfnav(dir.path(), &["--run-dir", "empty", "tokenize"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("trajectories.jsonl"), "{}", stderr(&out));
}

#[test]
fn remote_backend_without_token_fails_fast() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("remote.toml"),
        format!("{SMALL}\n[backend.remote]\nauth_env = \"CFNAV_CLI_TEST_MISSING_TOKEN\"\n"),
    )
    .unwrap();
    let out = cfnav(dir.path(), &["--config", "remote.toml", "--backend", "remote", "run"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("CFNAV_CLI_TEST_MISSING_TOKEN"), "{}", stderr(&out));
    assert!(!dir.path().join("run/trajectories.jsonl").exists());
}

#[test]
fn generated_corpus_feeds_a_jsonl_run() {
    let dir = tempfile::tempdir().unwrap();
    let gen = cfnav(
        dir.path(),
        &["gen-corpus", "--scene", "kitchen", "--routes", "2", "--goals", "4", "--out", "corpus.jsonl"],
    );
    assert!(gen.status.success(), "{}", stderr(&gen));
    assert!(cfnav(dir.path(), &["inspect", "corpus.jsonl"]).status.success());
    fs::write(
        dir.path().join("jsonl.toml"),
        "run_dir = \"out\"\n[input]\nkind = \"jsonl\"\npath = \"corpus.jsonl\"\n",
    )
    .unwrap();
    let run = cfnav(dir.path(), &["--config", "jsonl.toml", "run"]);
    assert!(run.status.success(), "{}", stderr(&run));
    assert!(dir.path().join("out/entropy.json").exists());
    assert!(!dir.path().join("out/benchmark.json").exists());
}

#[test]
fn bad_arguments_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = cfnav(dir.path(), &["--backend", "carrier-pigeon", "run"]);
    assert_eq!(out.status.code(), Some(2));
}
