//! Exit codes, usage errors, header conventions and the params table of the
//! command-line tool.

use std::path::{Path, PathBuf};
use std::process::Command;

fn sn() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sn"))
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("sn-cli-tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn unknown_command_exits_2_with_usage() {
    let out = sn().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("usage:"), "usage text missing: {stderr}");
}

#[test]
fn missing_command_exits_2() {
    let out = sn().output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_exits_2() {
    let out = sn().args(["params", "--no-such-flag", "1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("no-such-flag"), "{stderr}");
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tmp_dir("badcfg");
    let cfg = dir.join("run.cfg");
    std::fs::write(&cfg, "bogus-key=1\n").unwrap();
    let out = sn()
        .args(["params", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_1() {
    let dir = tmp_dir("nodata");
    let out = sn()
        .args(["train-face", "--data-dir", dir.join("missing").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error:"), "single-line error expected: {stderr}");
}

#[test]
fn params_prints_expected_totals() {
    let out = sn().args(["params", "--classes", "6"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("11566022"), "face total missing:\n{stdout}");
    assert!(stdout.contains("11642822"), "fused total missing:\n{stdout}");
    assert!(stdout.contains("conv1"));
    assert!(stdout.contains("output"));
}

#[test]
fn config_file_flag_precedence() {
    // Flags override the config file: classes=2 in the file, 6 on the line.
    let dir = tmp_dir("precedence");
    let cfg = dir.join("run.cfg");
    std::fs::write(&cfg, "classes=2\n").unwrap();
    let out = sn()
        .args(["params", "--config", cfg.to_str().unwrap(), "--classes", "6"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("11566022"), "{stdout}");
}

#[test]
fn synth_writes_manifests_with_headers() {
    let dir = tmp_dir("synth");
    let data = dir.join("data");
    let out = sn()
        .args([
            "synth",
            "--data-dir",
            data.to_str().unwrap(),
            "--identities", "2",
            "--train-per-identity", "3",
            "--test-per-identity", "2",
            "--utterances-per-identity", "5",
            "--frames", "3",
            "--seed", "9",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    for file in ["train.tsv", "test.tsv", "frames.tsv"] {
        let text = std::fs::read_to_string(data.join(file)).unwrap();
        let first = text.lines().next().unwrap();
        assert!(
            first.starts_with("# sn ") && first.contains("seed=9"),
            "{file} header: {first}"
        );
    }
    assert!(data.join("faces").read_dir().unwrap().count() >= 10);
    assert!(data.join("audio").read_dir().unwrap().count() >= 10);
}

#[test]
fn gradcheck_passes_and_prints_error() {
    let out = sn().args(["gradcheck", "--seed", "5"]).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "stdout: {stdout}");
    assert!(
        stdout.contains("max relative error"),
        "missing report: {stdout}"
    );
}

/// Tiny but complete pipeline through the binary: synth, train, fine-tune,
/// rejection, evaluation and naming all succeed and leave their artifacts.
#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tmp_dir("pipeline");
    let data = dir.join("data");
    let out_dir = dir.join("out");
    let base: Vec<String> = vec![
        "--data-dir".into(), data.to_str().unwrap().into(),
        "--out-dir".into(), out_dir.to_str().unwrap().into(),
        "--classes".into(), "2".into(),
        "--seed".into(), "3".into(),
        "--threads".into(), "2".into(),
    ];
    let run = |cmd: &str, extra: &[&str]| {
        let mut c = sn();
        c.arg(cmd).args(&base).args(extra);
        let out = c.output().unwrap();
        assert_eq!(
            out.status.code(),
            Some(0),
            "{cmd} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stdout).to_string()
    };
    run(
        "synth",
        &[
            "--identities", "2",
            "--train-per-identity", "4",
            "--test-per-identity", "2",
            "--utterances-per-identity", "5",
            "--frames", "4",
        ],
    );
    run("train-face", &["--epochs", "1", "--batch", "4"]);
    assert!(out_dir.join("face.model").exists());
    run("finetune-fused", &["--finetune-epochs", "1", "--batch", "4"]);
    assert!(out_dir.join("fused.model").exists());
    run("train-reject", &["--variant", "C", "--reject-epochs", "2"]);
    assert!(out_dir.join("reject.model").exists());
    let eval = run("eval-face", &[]);
    assert!(eval.contains("accuracy"), "{eval}");
    run("eval-reject", &[]);
    let naming = run("name", &["--threshold", "0"]);
    assert!(naming.contains("naming.tsv"), "{naming}");
    for artifact in ["naming.tsv", "timeline.tsv", "naming-metrics.txt", "confusion.tsv"] {
        let path = out_dir.join(artifact);
        assert!(path.exists(), "missing {artifact}");
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(
            text.starts_with("# sn "),
            "{artifact} missing version header"
        );
    }
}

#[test]
fn eval_face_errors_without_model_file() {
    let dir = tmp_dir("nomodel");
    let out = sn()
        .args([
            "eval-face",
            "--data-dir", dir.to_str().unwrap(),
            "--out-dir", dir.to_str().unwrap(),
            "--model", dir.join("nope.model").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

/// Helper used by the determinism acceptance criterion as well.
pub fn file_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}
