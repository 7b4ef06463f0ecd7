//! Behavioral tests of the `sgl0` binary: artifact layout, exit codes,
//! field-level config errors, eval/train agreement, and report aggregation.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sgl0_core::checkpoint::write_checkpoint;
use sgl0_core::model::{build_mlp, GroupingMode};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sgl0"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMOKE: &str = r#"
[model]
arch = "mlp"
sizes = [8, 16, 3]

[data]
source = "synthetic"
classes = 3
dim = 8
per_class = 50

[regularizer]
kind = "sparse-group-l0asso"
lambda = 0.001
beta0 = 0.01
sigma = 1.25
beta_interval_epochs = 5

[optimizer]
method = "adam"
learning_rate = 0.01

[training]
epochs = 6
batch_size = 32
seed = 1
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn train_into(config: &Path, out: &Path) -> Output {
    run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

fn json_field(text: &str, key: &str) -> f64 {
    let v: serde_json::Value = serde_json::from_str(text).expect("valid json");
    v[key].as_f64().unwrap_or_else(|| panic!("field {}", key))
}

#[test]
fn train_writes_all_artifacts_and_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "run.toml", SMOKE);
    let out_dir = tmp.path().join("run");
    let out = train_into(&config, &out_dir);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));

    for name in [
        "config.toml",
        "records.csv",
        "timing.csv",
        "report.json",
        "checkpoint.bin",
    ] {
        assert!(out_dir.join(name).exists(), "missing {}", name);
    }

    // the echo carries every default, not just what the file set
    let echo = std::fs::read_to_string(out_dir.join("config.toml")).unwrap();
    for needle in [
        "precision = \"f64\"",
        "probe_size = 512",
        "eval_batch_size = 256",
        "grouping = \"input\"",
        "weight_threshold = 0.00001",
        "lr_decay = 0.1",
        "adam_beta1 = 0.9",
    ] {
        assert!(
            echo.contains(needle),
            "echo missing {:?}:\n{}",
            needle,
            echo
        );
    }

    let records = std::fs::read_to_string(out_dir.join("records.csv")).unwrap();
    let mut lines = records.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,train_loss,probe_objective,test_error_pct,weight_sparsity_pct,neuron_sparsity_pct,beta,learning_rate"
    );
    assert_eq!(lines.count(), 6, "one row per epoch");

    let timing = std::fs::read_to_string(out_dir.join("timing.csv")).unwrap();
    assert_eq!(timing.lines().next().unwrap(), "epoch,wall_time_s");
    assert_eq!(timing.lines().count(), 7);
}

#[test]
fn eval_reproduces_the_final_train_record_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "run.toml", SMOKE);
    let out_dir = tmp.path().join("run");
    let out = train_into(&config, &out_dir);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));

    let records = std::fs::read_to_string(out_dir.join("records.csv")).unwrap();
    let last = records.lines().last().unwrap();
    let cols: Vec<&str> = last.split(',').collect();
    let (err, ws, ns): (f64, f64, f64) = (
        cols[3].parse().unwrap(),
        cols[4].parse().unwrap(),
        cols[5].parse().unwrap(),
    );

    let eval = run(&[
        "eval",
        "--checkpoint",
        out_dir.join("checkpoint.bin").to_str().unwrap(),
        "--config",
        out_dir.join("config.toml").to_str().unwrap(),
    ]);
    assert!(eval.status.success(), "stderr: {}", stderr_of(&eval));
    let text = stdout_of(&eval);
    assert_eq!(json_field(&text, "test_error_pct"), err);
    assert_eq!(json_field(&text, "weight_sparsity_pct"), ws);
    assert_eq!(json_field(&text, "neuron_sparsity_pct"), ns);
}

#[test]
fn repeated_runs_are_byte_identical_even_from_the_echoed_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "run.toml", SMOKE);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(train_into(&config, &a).status.success());
    // the resolved echo is a complete config in its own right
    assert!(train_into(&a.join("config.toml"), &b).status.success());
    let csv_a = std::fs::read(a.join("records.csv")).unwrap();
    let csv_b = std::fs::read(b.join("records.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    let ckpt_a = std::fs::read(a.join("checkpoint.bin")).unwrap();
    let ckpt_b = std::fs::read(b.join("checkpoint.bin")).unwrap();
    assert_eq!(ckpt_a, ckpt_b);
}

#[test]
fn baseline_echoes_omit_coupling_keys_and_reload_cleanly() {
    // Kinds without an auxiliary variable must not echo beta0/sigma/interval
    // (the loader rejects them), and sgd must not echo adam_* keys; the echo
    // has to stay retrainable either way.
    for kind in ["none", "l1", "group-lasso", "sparse-group-lasso"] {
        let tmp = tempfile::tempdir().unwrap();
        let text = format!(
            r#"
[model]
arch = "mlp"
sizes = [8, 16, 3]

[data]
source = "synthetic"
classes = 3
dim = 8
per_class = 50

[regularizer]
kind = "{kind}"
lambda = 0.001

[optimizer]
method = "sgd"
learning_rate = 0.05

[training]
epochs = 2
batch_size = 32
seed = 1
"#
        );
        let config = write_config(tmp.path(), "run.toml", &text);
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        assert!(train_into(&config, &a).status.success(), "kind {kind}");
        let echo = std::fs::read_to_string(a.join("config.toml")).unwrap();
        for key in ["beta0", "sigma", "beta_interval_epochs", "adam_beta1"] {
            assert!(!echo.contains(key), "kind {kind} echoed {key}");
        }
        let reload = train_into(&a.join("config.toml"), &b);
        assert!(
            reload.status.success(),
            "kind {kind}: {}",
            stderr_of(&reload)
        );
        assert_eq!(
            std::fs::read(a.join("records.csv")).unwrap(),
            std::fs::read(b.join("records.csv")).unwrap(),
            "kind {kind}"
        );
    }
}

#[test]
fn shipped_smoke_preset_finishes_quickly_and_exits_zero() {
    let preset = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets/synthetic-smoke.toml");
    let tmp = tempfile::tempdir().unwrap();
    let started = std::time::Instant::now();
    let out = train_into(&preset, &tmp.path().join("run"));
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    assert!(
        started.elapsed() < std::time::Duration::from_secs(60),
        "smoke preset took {:?}",
        started.elapsed()
    );
}

#[test]
fn seed_flag_overrides_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "run.toml", SMOKE);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(train_into(&config, &a).status.success());
    let out = bin()
        .args([
            "train",
            "--config",
            config.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            b.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));

    let report = std::fs::read_to_string(b.join("report.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["seed"].as_u64(), Some(7));
    // a different seed gives a different trajectory
    let csv_a = std::fs::read(a.join("records.csv")).unwrap();
    let csv_b = std::fs::read(b.join("records.csv")).unwrap();
    assert_ne!(csv_a, csv_b);
    // and the echoed config records the override
    let echo = std::fs::read_to_string(b.join("config.toml")).unwrap();
    assert!(echo.contains("seed = 7"));
}

#[test]
fn mnist_dir_falls_back_to_the_environment_variable() {
    // hand-built 8-sample "mnist" so the test stays fast
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    std::fs::create_dir_all(&data_dir).unwrap();
    let n = 8usize;
    let mut images = Vec::new();
    images.extend(0x0803u32.to_be_bytes());
    images.extend((n as u32).to_be_bytes());
    images.extend(28u32.to_be_bytes());
    images.extend(28u32.to_be_bytes());
    images.extend(std::iter::repeat(7u8).take(n * 784));
    let mut labels = Vec::new();
    labels.extend(0x0801u32.to_be_bytes());
    labels.extend((n as u32).to_be_bytes());
    labels.extend((0..n as u8).map(|i| i % 10));
    for split in ["train", "t10k"] {
        std::fs::write(
            data_dir.join(format!("{}-images-idx3-ubyte", split)),
            &images,
        )
        .unwrap();
        std::fs::write(
            data_dir.join(format!("{}-labels-idx1-ubyte", split)),
            &labels,
        )
        .unwrap();
    }

    let config = write_config(
        tmp.path(),
        "mnist.toml",
        r#"
[model]
arch = "mlp"
sizes = [784, 16, 10]

[data]
source = "mnist"

[regularizer]
kind = "none"

[training]
epochs = 1
batch_size = 4
"#,
    );
    let out_dir = tmp.path().join("run");
    let out = bin()
        .args([
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .env("SGL0_DATA_DIR", &data_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let echo = std::fs::read_to_string(out_dir.join("config.toml")).unwrap();
    assert!(echo.contains("data"), "echo records the resolved dir");
}

#[test]
fn config_errors_exit_one_with_field_level_messages() {
    let tmp = tempfile::tempdir().unwrap();
    let cases: Vec<(String, &str)> = vec![
        // unknown field is named
        (
            SMOKE.replace("lambda = 0.001", "lambdaa = 0.001"),
            "lambdaa",
        ),
        // unsupported precision names the field
        (format!("{}\nprecision = \"f32\"\n", SMOKE), "precision"),
        // conv net cannot run on vector data
        (
            SMOKE.replace(
                "arch = \"mlp\"\nsizes = [8, 16, 3]",
                "arch = \"lenet5-caffe\"",
            ),
            "lenet5-caffe requires",
        ),
        // layer sizes must fit the dataset
        (
            SMOKE.replace("sizes = [8, 16, 3]", "sizes = [9, 16, 3]"),
            "must map",
        ),
        // negative strength
        (
            SMOKE.replace("lambda = 0.001", "lambda = -0.5"),
            "regularizer",
        ),
        // baseline kinds reject the escalation knobs
        (
            SMOKE
                .replace("kind = \"sparse-group-l0asso\"", "kind = \"group-lasso\"")
                .replace("beta_interval_epochs = 5", ""),
            "beta0",
        ),
        // adam knobs rejected under sgd
        (
            SMOKE.replace("method = \"adam\"", "method = \"sgd\"\nadam_beta1 = 0.5"),
            "adam_beta1",
        ),
        // bad enum value lists the choices
        (
            SMOKE.replace("kind = \"sparse-group-l0asso\"", "kind = \"lasso\""),
            "group-lasso",
        ),
    ];
    for (i, (text, needle)) in cases.iter().enumerate() {
        let config = write_config(tmp.path(), &format!("bad{}.toml", i), text);
        let out = train_into(&config, &tmp.path().join(format!("out{}", i)));
        assert_eq!(out.status.code(), Some(1), "case {} should be usage", i);
        let err = stderr_of(&out);
        assert!(
            err.contains(needle),
            "case {}: expected {:?} in: {}",
            i,
            needle,
            err
        );
    }
}

#[test]
fn missing_config_file_exits_one() {
    let out = run(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("cannot read config"));
}

#[test]
fn zero_threads_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "run.toml", SMOKE);
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--threads",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("--threads"));
}

#[test]
fn bare_invocation_exits_one_and_help_exits_zero() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let out = run(&["--version"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn divergence_exits_two_with_a_structured_message() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        "diverge.toml",
        &SMOKE
            .replace("method = \"adam\"", "method = \"sgd\"")
            .replace("learning_rate = 0.01", "learning_rate = 1e308"),
    );
    let out = train_into(&config, &tmp.path().join("run"));
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    let err = stderr_of(&out);
    assert!(
        err.contains("diverged at epoch"),
        "expected divergence context in: {}",
        err
    );
}

#[test]
fn eval_of_an_all_zero_checkpoint_reports_total_sparsity() {
    let tmp = tempfile::tempdir().unwrap();
    let mut net = build_mlp(&[8, 16, 3], 1).unwrap();
    for layer in &mut net.layers {
        layer.weight = layer.weight.map(|_| 0.0);
        if let Some(b) = &layer.bias {
            layer.bias = Some(b.map(|_| 0.0));
        }
    }
    let ckpt = tmp.path().join("zero.bin");
    write_checkpoint(&ckpt, &net, GroupingMode::Input).unwrap();
    let config = write_config(tmp.path(), "run.toml", SMOKE);

    let out = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let text = stdout_of(&out);
    assert_eq!(json_field(&text, "weight_sparsity_pct"), 100.0);
    assert_eq!(json_field(&text, "neuron_sparsity_pct"), 100.0);
    // every tied logit resolves to class 0, so the error rate is the share
    // of other classes: 100 of 150 balanced samples
    assert_eq!(json_field(&text, "test_error_pct"), 100.0 * 100.0 / 150.0);
}

#[test]
fn eval_checkpoint_arch_mismatch_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let net = build_mlp(&[5, 4, 3], 1).unwrap();
    let ckpt = tmp.path().join("other.bin");
    write_checkpoint(&ckpt, &net, GroupingMode::Input).unwrap();
    let config = write_config(tmp.path(), "run.toml", SMOKE);
    let out = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("does not match"));
}

#[test]
fn corrupt_checkpoint_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("junk.bin");
    std::fs::write(&ckpt, b"not a checkpoint at all").unwrap();
    let config = write_config(tmp.path(), "run.toml", SMOKE);
    let out = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("checkpoint"));
}

fn fake_report(dir: &Path, regularizer: &str, err: f64, ws: f64, ns: f64) {
    std::fs::create_dir_all(dir).unwrap();
    let json = format!(
        r#"{{
  "schema_version": 1,
  "version": "0.1.0",
  "command": "train",
  "arch": "mlp",
  "data_source": "synthetic",
  "regularizer": "{}",
  "lambda": 0.001,
  "grouping": "input",
  "seed": 1,
  "epochs": 6,
  "weight_threshold": 1e-5,
  "neuron_threshold": 1e-5,
  "test_error_pct": {},
  "weight_sparsity_pct": {},
  "neuron_sparsity_pct": {},
  "total_params": 195,
  "total_groups": 24,
  "config_sha256": "0"
}}"#,
        regularizer, err, ws, ns
    );
    std::fs::write(dir.join("report.json"), json).unwrap();
}

#[test]
fn report_aggregates_mean_and_sample_std() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("c"),
    );
    fake_report(&a, "group-lasso", 0.6, 10.0, 5.0);
    fake_report(&b, "group-lasso", 0.8, 30.0, 15.0);
    fake_report(&c, "sparse-group-l0asso", 1.0, 50.0, 25.0);
    let summary_dir = tmp.path().join("summary");
    let out = run(&[
        "report",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        c.to_str().unwrap(),
        "--out",
        summary_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));

    let csv = std::fs::read_to_string(summary_dir.join("summary.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "regularizer,runs,weight_sparsity_mean,weight_sparsity_std,neuron_sparsity_mean,neuron_sparsity_std,test_error_mean,test_error_std"
    );
    let gl: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(gl[0], "group-lasso");
    assert_eq!(gl[1], "2");
    let err_mean: f64 = gl[6].parse().unwrap();
    let err_std: f64 = gl[7].parse().unwrap();
    assert!((err_mean - 0.7).abs() < 1e-12);
    assert!((err_std - 0.14142135623730953).abs() < 1e-12);
    let single: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(single[0], "sparse-group-l0asso");
    assert_eq!(single[7].parse::<f64>().unwrap(), 0.0, "single run: std 0");

    // stdout table mentions both methods
    let table = stdout_of(&out);
    assert!(table.contains("group-lasso"));
    assert!(table.contains("sparse-group-l0asso"));
}

#[test]
fn report_skips_incompatible_runs_with_a_warning() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("missing"),
    );
    fake_report(&a, "group-lasso", 0.6, 10.0, 5.0);
    fake_report(&b, "group-lasso", 0.8, 30.0, 15.0);
    // b gets an incompatible architecture
    let text = std::fs::read_to_string(b.join("report.json"))
        .unwrap()
        .replace("\"arch\": \"mlp\"", "\"arch\": \"lenet5-caffe\"");
    std::fs::write(b.join("report.json"), text).unwrap();

    let out = run(&[
        "report",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        c.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let err = stderr_of(&out);
    assert_eq!(err.matches("warning: skipping").count(), 2, "{}", err);

    // nothing usable at all -> usage error
    let out = run(&["report", c.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("no usable run reports"));
}
