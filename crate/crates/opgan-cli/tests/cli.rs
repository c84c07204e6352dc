//! End-to-end tests of the `opgan` binary: every subcommand exercised
//! through real process invocations against the synthetic corpus.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use opgan::config::TrainConfig;
use opgan::model::{DiscriminatorArch, GeneratorArch};

fn opgan() -> Command {
    Command::new(env!("CARGO_BIN_EXE_opgan"))
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

/// A configuration small enough that a couple of iterations take well under
/// a second even unoptimized.
fn write_tiny_config(dir: &Path, iters: usize) -> PathBuf {
    let config = TrainConfig {
        max_iters: iters,
        generator: GeneratorArch {
            widths: [2, 3, 4, 4, 5],
            q_order: 2,
            ..GeneratorArch::default()
        },
        discriminator: DiscriminatorArch {
            widths: [2, 3, 4, 4, 3],
            q_order: 2,
            ..DiscriminatorArch::default()
        },
        ..TrainConfig::default()
    };
    let path = dir.join("config.json");
    config.to_json_file(&path).unwrap();
    path
}

const TOY: [&str; 8] =
    ["--data", "toy", "--toy-records", "2", "--toy-segments", "3", "--holdout", "1"];

/// Train a tiny model into `dir` and return the model path.
fn train_tiny(dir: &Path, iters: usize) -> PathBuf {
    let config = write_tiny_config(dir, iters);
    let out = dir.join("run");
    let output = opgan()
        .arg("train")
        .args(TOY)
        .args(["--out".as_ref(), out.as_os_str(), "--config".as_ref(), config.as_os_str()])
        .output()
        .unwrap();
    assert!(output.status.success(), "train failed: {}", stderr_of(&output));
    out.join("model.opgn")
}

#[test]
fn same_seed_trainings_write_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path(), 2);
    let mut models = Vec::new();
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let output = opgan()
            .arg("train")
            .args(TOY)
            .args(["--out".as_ref(), out.as_os_str(), "--config".as_ref(), config.as_os_str()])
            .output()
            .unwrap();
        assert!(output.status.success(), "train failed: {}", stderr_of(&output));
        models.push(std::fs::read(out.join("model.opgn")).unwrap());
        csvs.push(std::fs::read(out.join("losses.csv")).unwrap());
    }
    assert_eq!(models[0], models[1], "same-seed runs wrote different models");
    assert_eq!(csvs[0], csvs[1], "same-seed runs wrote different loss logs");
}

#[test]
fn eval_prints_table_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny(dir.path(), 0);
    let csv_path = dir.path().join("scores.csv");
    let output = opgan()
        .arg("eval")
        .args(TOY)
        .args(["--model".as_ref(), model.as_os_str(), "--out".as_ref(), csv_path.as_os_str()])
        .output()
        .unwrap();
    assert!(output.status.success(), "eval failed: {}", stderr_of(&output));
    let table = stdout_of(&output);
    assert!(table.contains("sensor"), "missing table header: {table}");
    assert!(table.contains("toy"), "missing sensor label: {table}");
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("sensor,side,psnr_time_db,psnr_freq_db,n_segments\n"));
    assert!(csv.contains("toy,input,"));
    assert!(csv.contains("toy,output,"));
}

#[test]
fn synth_enhances_a_recording_with_sidecar_stats() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny(dir.path(), 0);

    // 10.4 s at 50 Hz: two whole 5-s segments plus a dropped tail.
    let input_path = dir.path().join("recording.txt");
    let mut text = String::from("# fs=50\n");
    for i in 0..520 {
        let t = i as f64 / 50.0;
        let v = 0.8 * (2.0 * std::f64::consts::PI * 7.0 * t).sin()
            + 0.3 * (2.0 * std::f64::consts::PI * 19.0 * t).sin();
        text.push_str(&format!("{v}\n"));
    }
    std::fs::write(&input_path, text).unwrap();

    let out_path = dir.path().join("enhanced.txt");
    let spec_path = dir.path().join("enhanced-spec.csv");
    let output = opgan()
        .arg("synth")
        .args(["--sensor", "csn"])
        .args(["--model".as_ref(), model.as_os_str(), "--input".as_ref(), input_path.as_os_str()])
        .args(["--out".as_ref(), out_path.as_os_str()])
        .args(["--spectrogram-out".as_ref(), spec_path.as_os_str()])
        .output()
        .unwrap();
    assert!(output.status.success(), "synth failed: {}", stderr_of(&output));

    let written = std::fs::read_to_string(&out_path).unwrap();
    let mut lines = written.lines();
    assert_eq!(lines.next(), Some("# fs=200"));
    assert_eq!(lines.count(), 2000, "two 5-s segments at 200 Hz");

    let stats = std::fs::read_to_string(dir.path().join("enhanced.stats.csv")).unwrap();
    let stat_lines: Vec<&str> = stats.lines().collect();
    assert_eq!(stat_lines[0], "segment,min,max");
    assert_eq!(stat_lines.len(), 3, "one row per segment plus the header");

    let spec = std::fs::read_to_string(&spec_path).unwrap();
    assert!(spec.starts_with("0,"), "spectrogram header starts at DC: {}", &spec[..20]);
}

#[test]
fn plot_writes_an_svg_page() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny(dir.path(), 0);
    let svg_path = dir.path().join("page.svg");
    let output = opgan()
        .arg("plot")
        .args(TOY)
        .args(["--segment", "1"])
        .args(["--model".as_ref(), model.as_os_str(), "--out".as_ref(), svg_path.as_os_str()])
        .output()
        .unwrap();
    assert!(output.status.success(), "plot failed: {}", stderr_of(&output));
    let svg = std::fs::read_to_string(&svg_path).unwrap();
    assert!(svg.starts_with("<svg"), "not an SVG: {}", &svg[..20.min(svg.len())]);
    assert!(svg.contains("Output PSNR"), "missing score banner");
}

#[test]
fn gradcheck_reports_pass() {
    let output = opgan().args(["gradcheck", "--cases", "2"]).output().unwrap();
    assert!(output.status.success(), "gradcheck failed: {}", stderr_of(&output));
    assert!(stdout_of(&output).contains("PASS"), "no PASS verdict: {}", stdout_of(&output));
}

#[test]
fn bench_reports_latency() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny(dir.path(), 0);
    let output = opgan()
        .arg("bench")
        .args(["--runs", "10"])
        .args(["--model".as_ref(), model.as_os_str()])
        .output()
        .unwrap();
    assert!(output.status.success(), "bench failed: {}", stderr_of(&output));
    let report = stdout_of(&output);
    assert!(report.contains("median"), "no latency report: {report}");
    assert!(report.contains("10 run(s)"), "wrong run count: {report}");
}

#[test]
fn resume_continues_to_a_larger_budget() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path(), 2);
    let out = dir.path().join("run");
    let output = opgan()
        .arg("train")
        .args(TOY)
        .args(["--out".as_ref(), out.as_os_str(), "--config".as_ref(), config.as_os_str()])
        .output()
        .unwrap();
    assert!(output.status.success(), "initial train failed: {}", stderr_of(&output));

    let output = opgan()
        .arg("train")
        .args(TOY)
        .args(["--out".as_ref(), out.as_os_str()])
        .args(["--resume", "--iters", "4"])
        .output()
        .unwrap();
    assert!(output.status.success(), "resume failed: {}", stderr_of(&output));

    let csv = std::fs::read_to_string(out.join("losses.csv")).unwrap();
    let iters: Vec<&str> =
        csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(iters, ["1", "2", "3", "4"], "loss log should cover all four iterations");
}

#[test]
fn resume_rejects_model_shaping_flags() {
    let dir = tempfile::tempdir().unwrap();
    let output = opgan()
        .arg("train")
        .args(TOY)
        .args(["--out".as_ref(), dir.path().as_os_str()])
        .args(["--resume", "--seed", "7"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr_of(&output).contains("--seed"), "stderr: {}", stderr_of(&output));
}

#[test]
fn missing_model_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.opgn");
    let output = opgan()
        .arg("eval")
        .args(TOY)
        .args(["--model".as_ref(), missing.as_os_str()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr_of(&output).starts_with("error:"), "stderr: {}", stderr_of(&output));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let output = opgan().args(["train", "--no-such-flag"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}
