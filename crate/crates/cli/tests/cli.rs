use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn morphkv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morphkv")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .display()
        .to_string()
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn run_into(name: &str) -> PathBuf {
    let dir = scratch(name);
    let out = morphkv(&[
        "run",
        "--config",
        &config("shadow_tiny.toml"),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&morphkv(&["frobnicate"])), 1);
    assert_eq!(code(&morphkv(&[])), 1);
    assert_eq!(code(&morphkv(&["run"])), 1);
    assert_eq!(code(&morphkv(&["run", "--config", "no/such/file.toml"])), 1);
    assert_eq!(
        code(&morphkv(&["compare", "--config", &config("desk_morphkv.toml")])),
        1
    );
}

#[test]
fn help_and_version_exit_zero() {
    let out = morphkv(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("compare"));
    assert_eq!(code(&morphkv(&["--version"])), 0);
}

#[test]
fn run_writes_outputs_deterministically() {
    let a = run_into("cli_run_a");
    let b = run_into("cli_run_b");
    for file in ["steps.csv", "trace.json", "repetition.json"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    let csv = fs::read_to_string(a.join("steps.csv")).unwrap();
    assert!(csv.starts_with("step,policy,occupancy,bytes,ratio\n"));
    assert_eq!(csv.lines().count(), 12);
}

#[test]
fn metrics_recomputes_saved_trace() {
    let dir = run_into("cli_metrics");
    let trace = dir.join("trace.json");
    let out_dir = dir.join("recomputed");
    let out = morphkv(&[
        "metrics",
        "--trace",
        trace.to_str().unwrap(),
        "--label",
        "morphkv",
        "--out",
        out_dir.to_str().unwrap(),
        "--debug-invariants",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read_to_string(out_dir.join("steps.csv")).unwrap(),
        fs::read_to_string(dir.join("steps.csv")).unwrap()
    );
}

#[test]
fn tampered_trace_exits_two() {
    let dir = run_into("cli_tampered");
    let path = dir.join("trace.json");
    let text = fs::read_to_string(&path).unwrap();
    let key = "\"bytes\": ";
    let start = text.rfind(key).unwrap() + key.len();
    let end = start + text[start..].find(|c: char| !c.is_ascii_digit()).unwrap();
    let bumped = text[start..end].parse::<u64>().unwrap() + 1;
    fs::write(&path, format!("{}{bumped}{}", &text[..start], &text[end..])).unwrap();
    let out = morphkv(&[
        "metrics",
        "--trace",
        path.to_str().unwrap(),
        "--out",
        dir.join("m").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invariant"));
}

#[test]
fn oracle_reproduces_committed_regression() {
    let dir = scratch("cli_oracle");
    let baseline = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/oracle_regression.csv");
    let out = morphkv(&[
        "oracle",
        "--config",
        &config("oracle_tiny.toml"),
        "--baseline",
        baseline.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("morphkv_sum: mean error"));

    let out = morphkv(&[
        "oracle",
        "--config",
        &config("oracle_tiny.toml"),
        "--instances",
        "3",
        "--baseline",
        baseline.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn compare_and_inspect() {
    let dir = scratch("cli_compare");
    let out = morphkv(&[
        "compare",
        "--config",
        &config("desk_morphkv.toml"),
        &config("desk_scissorhands.toml"),
        &config("desk_full_attention.toml"),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    assert!(dir.join("compare.json").exists());

    let out = morphkv(&[
        "inspect",
        "--config",
        &config("shadow_tiny.toml"),
        "--step",
        "3",
        "--step",
        "10",
    ]);
    assert_eq!(code(&out), 0);
    let json = String::from_utf8_lossy(&out.stdout);
    assert_eq!(json.matches("\"step\":").count(), 2);
    assert!(json.contains("fused_scores"));
}
