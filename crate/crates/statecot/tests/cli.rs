use std::path::Path;
use std::process::{Command, Output};

use statecot::cli::TraceRecord;
use statecot::io::read_jsonl;

fn statecot(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_statecot"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .env_remove("STATECOT_PRECISION")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = statecot(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn pipeline_runs_and_correction_off_equals_zero_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--samples", "40"]);
    ok(d, &["segment"]);
    ok(d, &["--set", "pretrain.epochs=2", "train", "--epochs", "1"]);
    for f in ["base.json", "adapters.json", "train_report.csv", "effective_config.toml"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    let echoed = std::fs::read_to_string(d.join("effective_config.toml")).unwrap();
    assert!(echoed.contains("epochs = 1"));

    let gen = |flag: &str, out: &str| {
        ok(d, &["--set", &format!("paths.traces={out}"), "generate", "--limit", "3", flag, "--greedy"]);
        read_jsonl::<TraceRecord>(&d.join(out)).unwrap()
    };
    let off = gen("--no-correction", "off.jsonl");
    let zero = gen("--alpha-max=0", "zero.jsonl");
    assert_eq!(off.len(), 3);
    for (a, b) in off.iter().zip(&zero) {
        assert_eq!(a.trace.steps.len(), b.trace.steps.len());
        for (x, y) in a.trace.steps.iter().zip(&b.trace.steps) {
            // everything but the wall-clock timing
            assert_eq!((x.pattern, &x.tokens, x.alpha), (y.pattern, &y.tokens, y.alpha));
            assert_eq!(x.raw_delta_norm.to_bits(), y.raw_delta_norm.to_bits());
        }
        assert_eq!(a.trace.answer, b.trace.answer);
    }

    ok(d, &["prune", "--keep", "0.5"]);
    let q = std::fs::read_to_string(d.join("qualities.csv")).unwrap();
    assert_eq!(q.lines().count(), 41);
}

#[test]
fn bench_writes_one_row_per_length_and_mode() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "--set", "bench.n_layers=1", "--set", "bench.d_model=16", "--set", "bench.n_heads=2",
            "--set", "bench.prompt_len=4", "--set", "bench.step_len=8",
            "bench", "--lengths", "32,64,128", "--reps", "1",
        ],
    );
    let csv = std::fs::read_to_string(d.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    let dat = std::fs::read_to_string(d.join("bench.dat")).unwrap();
    assert_eq!(dat.lines().filter(|l| !l.starts_with('#')).count(), 3);
}

#[test]
fn usage_errors_exit_two_and_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(statecot(d, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(statecot(d, &["generate", "--greedy", "--sample"]).status.code(), Some(2));
    assert_eq!(statecot(d, &["--set", "train.epochs=many", "synth"]).status.code(), Some(1));
    // nothing to segment yet
    assert_eq!(statecot(d, &["segment"]).status.code(), Some(1));
    let bad = Command::new(env!("CARGO_BIN_EXE_statecot"))
        .args(["--out-dir", d.to_str().unwrap(), "synth"])
        .env("STATECOT_PRECISION", "f16")
        .status()
        .unwrap();
    assert_eq!(bad.code(), Some(2));
}

#[test]
fn verify_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = statecot(dir.path(), &["verify"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(text.lines().all(|l| l.starts_with("PASS")));
    assert!(dir.path().join("verify.json").exists());
}
