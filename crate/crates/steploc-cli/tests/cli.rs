//! Smoke tests for the command-line surface: stagewise subcommands that
//! compose into a full run over the bundled fixtures, flag overrides beating
//! the config file, and the stable exit-code contract (1 for configuration
//! problems, 2 for backend failures, 3 for missing upstream artifacts).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .canonicalize()
        .expect("fixtures directory resolves")
}

fn steploc(args: &[String]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_steploc")).args(args).output().expect("binary launches")
}

fn assert_success(output: &Output, context: &str) {
    assert!(
        output.status.success(),
        "{context} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("process exited normally")
}

fn stderr_text(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

/// Complete flag set for a mock-backed fixture run writing under `out`.
fn fixture_flags(out: &Path) -> Vec<String> {
    let fixtures = fixtures_dir();
    [
        "--corpus",
        fixtures.join("fixture_corpus.jsonl").to_str().expect("utf8 path"),
        "--schema",
        "canonical",
        "--strict",
        "--model-id",
        "scripted-tutor-7b",
        "--backend",
        "mock",
        "--mock-script",
        fixtures.join("mock_responses.jsonl").to_str().expect("utf8 path"),
        "--setting",
        "wo_s",
        "--setting",
        "w_cor",
        "--setting",
        "random",
        "--root-seed",
        "42",
        "--n-random-runs",
        "50",
        "--embedding-provider",
        "hash",
        "--embedding-dimension",
        "32",
        "--embedding-seed",
        "7",
        "--few-shot-count",
        "0",
        "--parallelism",
        "2",
        "--n-trees",
        "30",
        "--n-forest-seeds",
        "3",
        "--out",
        out.to_str().expect("utf8 path"),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn with_subcommand(subcommand: &str, flags: &[String]) -> Vec<String> {
    let mut args = vec![subcommand.to_string()];
    args.extend_from_slice(flags);
    args
}

#[test]
fn stagewise_subcommands_compose_into_a_full_run() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = dir.path().join("out");
    let flags = fixture_flags(&out);

    let expected_artifacts: [(&str, &str); 7] = [
        ("ingest", "corpus.jsonl"),
        ("solve", "solutions.jsonl"),
        ("correct", "corrections.jsonl"),
        ("localize", "predictions_w_cor.jsonl"),
        ("metrics", "results/summary_metrics.json"),
        ("features", "features.csv"),
        ("analyze", "analysis/summary_analysis.json"),
    ];
    for (subcommand, artifact) in expected_artifacts {
        let output = steploc(&with_subcommand(subcommand, &flags));
        assert_success(&output, subcommand);
        assert!(
            out.join(artifact).is_file(),
            "{subcommand} should have written {artifact}"
        );
        let stdout = String::from_utf8_lossy(&output.stdout);
        assert!(stdout.contains("artifacts in"), "{subcommand} should report its output directory");
    }
    for artifact in ["predictions_wo_s.jsonl", "predictions_random.jsonl"] {
        assert!(out.join(artifact).is_file(), "localize should have written {artifact}");
    }

    // The report subcommand renders strictly from the persisted summaries.
    let output = steploc(&with_subcommand("report", &flags));
    assert_success(&output, "report");
    assert!(out.join("report.md").is_file(), "report.md should exist");
    assert!(
        String::from_utf8_lossy(&output.stdout).contains("report for run"),
        "report should name the run it rendered"
    );

    // A final full run over the same directory succeeds by reusing artifacts.
    let output = steploc(&with_subcommand("run", &flags));
    assert_success(&output, "run");
    assert!(
        String::from_utf8_lossy(&output.stdout).contains("0 cache miss(es)"),
        "a fully resumed run should not touch the backend"
    );
}

#[test]
fn flag_overrides_beat_the_config_file() {
    let dir = tempfile::tempdir().expect("tempdir");
    let fixtures = fixtures_dir();
    let configured_out = dir.path().join("configured");
    let overridden_out = dir.path().join("overridden");
    let config = serde_json::json!({
        "corpus": {
            "path": fixtures.join("fixture_corpus.jsonl"),
            "schema": "canonical"
        },
        "model": {
            "model_id": "scripted-tutor-7b",
            "backend": "mock",
            "mock_script": fixtures.join("mock_responses.jsonl")
        },
        "settings": ["wo_s", "w_gs", "w_cor", "random"],
        "few_shot_count": 0,
        "strict": true,
        "out_dir": configured_out,
        "cache_dir": configured_out.join("cache")
    });
    let config_path = dir.path().join("config.json");
    std::fs::write(&config_path, serde_json::to_vec_pretty(&config).expect("config serializes"))
        .expect("config writes");

    let output = steploc(&[
        "ingest".to_string(),
        "--config".to_string(),
        config_path.to_str().expect("utf8 path").to_string(),
        "--out".to_string(),
        overridden_out.to_str().expect("utf8 path").to_string(),
        "--setting".to_string(),
        "wo_s".to_string(),
    ]);
    assert_success(&output, "ingest with overrides");
    assert!(overridden_out.join("corpus.jsonl").is_file(), "--out must redirect the artifacts");
    assert!(!configured_out.exists(), "the configured directory must stay untouched");

    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(overridden_out.join("manifest.json")).expect("manifest exists"),
    )
    .expect("manifest parses");
    assert_eq!(
        manifest["settings"],
        serde_json::json!(["wo_s"]),
        "--setting must replace the configured setting list"
    );
}

#[test]
fn missing_corpus_is_a_config_error() {
    let output = steploc(&["ingest".to_string()]);
    assert_eq!(exit_code(&output), 1, "stderr: {}", stderr_text(&output));
    assert!(stderr_text(&output).contains("corpus"), "the message should name what is missing");
}

#[test]
fn unknown_setting_is_a_config_error() {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut flags = fixture_flags(&dir.path().join("out"));
    flags.extend(["--setting".to_string(), "bogus".to_string()]);
    let output = steploc(&with_subcommand("ingest", &flags));
    assert_eq!(exit_code(&output), 1, "stderr: {}", stderr_text(&output));
    assert!(
        stderr_text(&output).contains("unknown setting 'bogus'"),
        "the message should quote the bad value"
    );
}

#[test]
fn cold_cache_only_backend_is_a_backend_error() {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut flags = fixture_flags(&dir.path().join("out"));
    let backend_at = flags.iter().position(|f| f == "--backend").expect("flag present");
    flags[backend_at + 1] = "cache_only".to_string();
    let mock_at = flags.iter().position(|f| f == "--mock-script").expect("flag present");
    flags.drain(mock_at..=mock_at + 1);
    let output = steploc(&with_subcommand("solve", &flags));
    assert_eq!(
        exit_code(&output),
        2,
        "a cold cache with no backend behind it must fail as a backend error; stderr: {}",
        stderr_text(&output)
    );
}

#[test]
fn report_without_metrics_is_a_missing_artifact_error() {
    let dir = tempfile::tempdir().expect("tempdir");
    let flags = fixture_flags(&dir.path().join("out"));
    let output = steploc(&with_subcommand("report", &flags));
    assert_eq!(exit_code(&output), 3, "stderr: {}", stderr_text(&output));
    assert!(
        stderr_text(&output).contains("missing upstream artifact"),
        "the message should say what has to run first"
    );
}
