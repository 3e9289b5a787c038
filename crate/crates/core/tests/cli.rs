use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[stream]
input_dim = 6
base_classes = 3
base_samples_per_class = 20
sessions = 2
ways = 2
shots = 3
test_per_class = 10

[model]
input_dim = 6
hidden = [8, 8]
embedding_dim = 4

[base]
epochs = 3
batch_size = 20

[session]
epochs = 2

[ball]
transform_hidden = [6, 6]

[run]
methods = ["flower", "no-ball"]
seeds = [1, 2]
"#;

fn flower(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flower"))
        .args(args)
        .current_dir(dir)
        .env_remove("FLOWER_THREADS")
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

#[test]
fn run_writes_every_output_file() {
    let dir = setup();
    let out = flower(&["run", "--config", "small.toml", "--out", "o"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["results.jsonl", "accuracy.csv", "curves.csv", "summary.json", "config.toml", "failures.csv", "timings.csv"] {
        let text = std::fs::read_to_string(dir.path().join("o").join(f)).unwrap();
        assert!(text.ends_with('\n'), "{f}");
    }
    let jsonl = std::fs::read_to_string(dir.path().join("o/results.jsonl")).unwrap();
    // 2 methods x 2 seeds x 3 tasks
    assert_eq!(jsonl.lines().count(), 12);
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = setup();
    std::fs::write(dir.path().join("typo.toml"), "[noise]\nbuond = 0.1\n").unwrap();
    let out = flower(&["run", "--config", "typo.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("buond"));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = setup();
    let out = flower(&["run", "--config", "absent.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let dir = setup();
    let out = Command::new(env!("CARGO_BIN_EXE_flower"))
        .args(["run", "--config", "small.toml", "--out", "o"])
        .current_dir(dir.path())
        .env("FLOWER_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diverging_cells_exit_with_runtime_code() {
    let dir = setup();
    let text = SMALL.replace("[base]\n", "[base]\nschedule = { initial = 1e200 }\n");
    std::fs::write(dir.path().join("bad.toml"), text).unwrap();
    let out = flower(&["run", "--config", "bad.toml", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let failures = std::fs::read_to_string(dir.path().join("o/failures.csv")).unwrap();
    assert!(failures.lines().count() > 1);
}

#[test]
fn train_base_then_eval() {
    let dir = setup();
    let out = flower(&["train-base", "--config", "small.toml", "--seeds", "4", "--out", "s"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let state = dir.path().join("s/state_flower_seed4.json");
    assert!(state.exists());
    let out = flower(&["eval", "--state", state.to_str().unwrap(), "--config", "small.toml"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let line = String::from_utf8(out.stdout).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(v["session"], 1);
    assert_eq!(v["seed"], 4);
}

#[test]
fn sweep_writes_one_directory_per_value() {
    let dir = setup();
    let out = flower(&["sweep-m", "--config", "small.toml", "--seeds", "1", "--values", "1,2", "--out", "w"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("w/trials_1/accuracy.csv").exists());
    assert!(dir.path().join("w/trials_2/accuracy.csv").exists());
    let sweep = std::fs::read_to_string(dir.path().join("w/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
}

#[test]
fn fractional_trials_are_rejected() {
    let dir = setup();
    let out = flower(&["sweep-m", "--config", "small.toml", "--values", "1.5"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn selftest_passes() {
    let dir = setup();
    let out = flower(&["selftest", "--seeds", "3"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}
