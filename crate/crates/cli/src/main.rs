//! `sgl0` — train, evaluate, and summarize structured-sparsity runs.
//!
//! Subcommands:
//! * `train`  — run one training job from a TOML config, writing the run
//!   directory (resolved config, per-epoch CSV, timing sidecar, final JSON
//!   report, checkpoint).
//! * `eval`   — prune a checkpoint at the configured thresholds and measure
//!   sparsity and test error.
//! * `report` — aggregate several run directories into per-method
//!   mean [std] rows.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error
//! (including training divergence, in which case the last finished epoch's
//! checkpoint is kept).

mod artifacts;
mod config;

use std::cell::RefCell;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use sgl0_core::checkpoint::{read_checkpoint, write_checkpoint};
use sgl0_core::data::{load_mnist_idx, make_synthetic, Dataset, Split};
use sgl0_core::metrics;
use sgl0_core::model::{
    build_lenet5_caffe, build_mlp, count_params, extract_groups, test_error_pct, Architecture,
    GroupingMode, NetworkParams,
};
use sgl0_core::trainer::{run_training, TrainRecord};
use sha2::{Digest, Sha256};

use artifacts::{EpochLog, RunReport, REPORT_SCHEMA};
use config::{ArchSpec, DataSpec, Resolved};

#[derive(Parser)]
#[command(
    name = "sgl0",
    version,
    about = "Structured-sparsity training with group-lasso and l0 penalties"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model according to a TOML run configuration.
    Train {
        /// Path to the run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Override [training].seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory (overrides [output].dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; 1 is deterministic. Kernels are single-threaded,
        /// so larger values change nothing.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Prune a checkpoint at the configured thresholds and evaluate it.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run configuration naming the dataset and thresholds (typically
        /// the resolved config.toml from the run directory).
        #[arg(long)]
        config: PathBuf,
        /// Directory to write eval_report.json into (stdout always gets it).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize finished run directories into per-method mean [std] rows.
    Report {
        /// Run directories, each containing a report.json.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Directory to write summary.csv into.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failures mapped onto the two nonzero exit codes.
enum Failure {
    /// Bad invocation or configuration → exit 1.
    Usage(String),
    /// Failure while doing the work (I/O, corrupt data, divergence) → exit 2.
    Runtime(String),
}

fn main() {
    let code = match Cli::try_parse() {
        Ok(cli) => match run(cli) {
            Ok(()) => 0,
            Err(Failure::Usage(msg)) => {
                eprintln!("error: {}", msg);
                1
            }
            Err(Failure::Runtime(msg)) => {
                eprintln!("error: {}", msg);
                2
            }
        },
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            if ok {
                0
            } else {
                1
            }
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Train {
            config,
            seed,
            out,
            threads,
        } => cmd_train(&config, seed, out, threads),
        Cmd::Eval {
            checkpoint,
            config,
            out,
        } => cmd_eval(&checkpoint, &config, out),
        Cmd::Report { dirs, out } => cmd_report(&dirs, out),
    }
}

fn sha256_hex(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{:02x}", b)).collect()
}

fn arch_name(arch: &ArchSpec) -> &'static str {
    match arch {
        ArchSpec::LeNet5Caffe => "lenet5-caffe",
        ArchSpec::Mlp(_) => "mlp",
    }
}

fn data_source_name(data: &DataSpec) -> &'static str {
    match data {
        DataSpec::Mnist { .. } => "mnist",
        DataSpec::Synthetic { .. } => "synthetic",
    }
}

fn grouping_name(mode: GroupingMode) -> &'static str {
    match mode {
        GroupingMode::Input => "input",
        GroupingMode::Output => "output",
    }
}

fn build_net(cfg: &Resolved) -> Result<NetworkParams, Failure> {
    match &cfg.arch {
        ArchSpec::LeNet5Caffe => Ok(build_lenet5_caffe(cfg.settings.seed)),
        ArchSpec::Mlp(sizes) => {
            build_mlp(sizes, cfg.settings.seed).map_err(|e| Failure::Usage(e.to_string()))
        }
    }
}

/// Synthetic data draws from a stream distinct from weight init, which also
/// uses the run seed.
fn synthetic_seed(seed: u64) -> u64 {
    seed.wrapping_add(1)
}

fn load_train_data(cfg: &Resolved) -> Result<(Dataset, Dataset), Failure> {
    match &cfg.data {
        DataSpec::Mnist { dir } => {
            let train = load_mnist_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
                Split::Train,
            )
            .map_err(|e| Failure::Runtime(format!("load mnist from {}: {}", dir.display(), e)))?;
            let test = load_test_data(cfg)?;
            Ok((train, test))
        }
        DataSpec::Synthetic { .. } => {
            let ds = load_test_data(cfg)?;
            Ok((ds.clone(), ds))
        }
    }
}

/// The evaluation split: MNIST t10k, or the full synthetic set (which also
/// serves as its own training set).
fn load_test_data(cfg: &Resolved) -> Result<Dataset, Failure> {
    match &cfg.data {
        DataSpec::Mnist { dir } => load_mnist_idx(
            &dir.join("t10k-images-idx3-ubyte"),
            &dir.join("t10k-labels-idx1-ubyte"),
            Split::Test,
        )
        .map_err(|e| Failure::Runtime(format!("load mnist from {}: {}", dir.display(), e))),
        DataSpec::Synthetic {
            classes,
            dim,
            per_class,
        } => make_synthetic(
            *classes,
            *dim,
            *per_class,
            synthetic_seed(cfg.settings.seed),
        )
        .map_err(|e| Failure::Runtime(e.to_string())),
    }
}

fn cmd_train(
    config_path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    threads: usize,
) -> Result<(), Failure> {
    if threads < 1 {
        return Err(Failure::Usage("--threads must be >= 1".into()));
    }
    let cfg = config::load(config_path, seed, out).map_err(Failure::Usage)?;
    if threads > 1 {
        eprintln!(
            "note: kernels are single-threaded; --threads {} changes nothing",
            threads
        );
    }

    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Failure::Runtime(format!("create {}: {}", cfg.out_dir.display(), e)))?;
    std::fs::write(cfg.out_dir.join("config.toml"), &cfg.echo)
        .map_err(|e| Failure::Runtime(format!("write config echo: {}", e)))?;

    let (train, test) = load_train_data(&cfg)?;
    let net = build_net(&cfg)?;
    let settings = cfg.settings.clone();

    eprintln!(
        "training {} on {}: {} epochs, {} train / {} test samples, seed {}",
        arch_name(&cfg.arch),
        data_source_name(&cfg.data),
        settings.epochs,
        train.len(),
        test.len(),
        settings.seed
    );

    let log = RefCell::new(
        EpochLog::create(&cfg.out_dir)
            .map_err(|e| Failure::Runtime(format!("create epoch logs: {}", e)))?,
    );
    let log_error: RefCell<Option<std::io::Error>> = RefCell::new(None);
    let epochs = settings.epochs;
    let on_epoch = |r: &TrainRecord| {
        eprintln!(
            "epoch {:>4}/{}  loss {:.6}  err {:.2}%  ws {:.2}%  ns {:.2}%  beta {:.3e}  lr {:.3e}  {:.1}s",
            r.epoch,
            epochs,
            r.train_loss,
            r.test_error_pct,
            r.weight_sparsity_pct,
            r.neuron_sparsity_pct,
            r.beta,
            r.learning_rate,
            r.wall_time_s
        );
        if log_error.borrow().is_none() {
            if let Err(e) = log.borrow_mut().append(r) {
                *log_error.borrow_mut() = Some(e);
            }
        }
    };

    let outcome = run_training(net, &train, &test, &settings, on_epoch);
    if let Some(e) = log_error.into_inner() {
        return Err(Failure::Runtime(format!("write epoch logs: {}", e)));
    }

    match outcome {
        Ok(outcome) => {
            let ckpt = cfg.out_dir.join("checkpoint.bin");
            write_checkpoint(&ckpt, &outcome.net, settings.grouping)
                .map_err(|e| Failure::Runtime(format!("write checkpoint: {}", e)))?;
            let partition = extract_groups(&outcome.net, settings.grouping);
            let last = outcome
                .records
                .last()
                .expect("at least one epoch was validated");
            let report = RunReport {
                schema_version: REPORT_SCHEMA,
                version: env!("CARGO_PKG_VERSION").into(),
                command: "train".into(),
                arch: arch_name(&cfg.arch).into(),
                data_source: data_source_name(&cfg.data).into(),
                regularizer: config::regularizer_name(settings.regularizer.kind).into(),
                lambda: settings.regularizer.lambda,
                grouping: grouping_name(settings.grouping).into(),
                seed: settings.seed,
                epochs: settings.epochs,
                weight_threshold: settings.weight_threshold,
                neuron_threshold: settings.neuron_threshold,
                test_error_pct: last.test_error_pct,
                weight_sparsity_pct: last.weight_sparsity_pct,
                neuron_sparsity_pct: last.neuron_sparsity_pct,
                total_params: count_params(&outcome.net),
                total_groups: partition.total_groups(),
                final_train_loss: Some(last.train_loss),
                final_probe_objective: Some(last.probe_objective),
                wall_time_total_s: Some(outcome.records.iter().map(|r| r.wall_time_s).sum::<f64>()),
                config_sha256: sha256_hex(&cfg.echo),
            };
            artifacts::write_json(&cfg.out_dir.join("report.json"), &report)
                .map_err(|e| Failure::Runtime(format!("write report: {}", e)))?;
            eprintln!(
                "done: err {:.2}%  ws {:.2}%  ns {:.2}%  ({})",
                last.test_error_pct,
                last.weight_sparsity_pct,
                last.neuron_sparsity_pct,
                cfg.out_dir.display()
            );
            Ok(())
        }
        Err(failure) => {
            let mut msg = failure.error.to_string();
            if let Some((net, epoch)) = failure.last_good {
                let ckpt = cfg.out_dir.join("checkpoint.bin");
                match write_checkpoint(&ckpt, &net, settings.grouping) {
                    Ok(()) => {
                        msg.push_str(&format!(
                            "; kept checkpoint from epoch {} at {}",
                            epoch,
                            ckpt.display()
                        ));
                    }
                    Err(e) => msg.push_str(&format!("; also failed to keep checkpoint: {}", e)),
                }
            }
            Err(Failure::Runtime(msg))
        }
    }
}

fn arches_match(spec: &ArchSpec, arch: &Architecture) -> bool {
    match (spec, arch) {
        (ArchSpec::LeNet5Caffe, Architecture::LeNet5Caffe) => true,
        (ArchSpec::Mlp(a), Architecture::Mlp { sizes }) => a == sizes,
        _ => false,
    }
}

fn cmd_eval(checkpoint: &Path, config_path: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = config::load(config_path, None, None).map_err(Failure::Usage)?;
    let (net, grouping) =
        read_checkpoint(checkpoint).map_err(|e| Failure::Runtime(e.to_string()))?;
    if !arches_match(&cfg.arch, &net.arch) {
        return Err(Failure::Usage(format!(
            "checkpoint architecture does not match [model] arch = {:?}",
            arch_name(&cfg.arch)
        )));
    }
    if grouping != cfg.settings.grouping {
        eprintln!(
            "note: checkpoint was grouped by {}; using that instead of the config's {}",
            grouping_name(grouping),
            grouping_name(cfg.settings.grouping)
        );
    }

    let test = load_test_data(&cfg)?;
    let partition = extract_groups(&net, grouping);
    let s = &cfg.settings;
    let pruned = metrics::prune(&net, &partition, s.weight_threshold, s.neuron_threshold)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let sparsity =
        metrics::sparsity_report(&pruned, &partition, s.weight_threshold, s.neuron_threshold)
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    let err = test_error_pct(&pruned, &test.images, &test.labels, s.eval_batch_size)
        .map_err(|e| Failure::Runtime(e.to_string()))?;

    let report = RunReport {
        schema_version: REPORT_SCHEMA,
        version: env!("CARGO_PKG_VERSION").into(),
        command: "eval".into(),
        arch: arch_name(&cfg.arch).into(),
        data_source: data_source_name(&cfg.data).into(),
        regularizer: config::regularizer_name(s.regularizer.kind).into(),
        lambda: s.regularizer.lambda,
        grouping: grouping_name(grouping).into(),
        seed: s.seed,
        epochs: s.epochs,
        weight_threshold: s.weight_threshold,
        neuron_threshold: s.neuron_threshold,
        test_error_pct: err,
        weight_sparsity_pct: sparsity.weight_sparsity_pct,
        neuron_sparsity_pct: sparsity.neuron_sparsity_pct,
        total_params: sparsity.total_params,
        total_groups: sparsity.total_groups,
        final_train_loss: None,
        final_probe_objective: None,
        wall_time_total_s: None,
        config_sha256: sha256_hex(&cfg.echo),
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{}", text);
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)
            .map_err(|e| Failure::Runtime(format!("create {}: {}", dir.display(), e)))?;
        artifacts::write_json(&dir.join("eval_report.json"), &report)
            .map_err(|e| Failure::Runtime(format!("write eval report: {}", e)))?;
    }
    Ok(())
}

fn cmd_report(dirs: &[PathBuf], out: Option<PathBuf>) -> Result<(), Failure> {
    let mut reports: Vec<RunReport> = Vec::new();
    for dir in dirs {
        let path = dir.join("report.json");
        let parsed: Result<RunReport, String> = std::fs::read_to_string(&path)
            .map_err(|e| e.to_string())
            .and_then(|text| serde_json::from_str(&text).map_err(|e| e.to_string()));
        let report = match parsed {
            Ok(r) => r,
            Err(e) => {
                eprintln!("warning: skipping {}: {}", path.display(), e);
                continue;
            }
        };
        if report.schema_version != REPORT_SCHEMA {
            eprintln!(
                "warning: skipping {}: schema version {} (expected {})",
                path.display(),
                report.schema_version,
                REPORT_SCHEMA
            );
            continue;
        }
        if let Some(first) = reports.first() {
            if report.arch != first.arch || report.data_source != first.data_source {
                eprintln!(
                    "warning: skipping {}: {}/{} runs cannot aggregate with {}/{}",
                    path.display(),
                    report.arch,
                    report.data_source,
                    first.arch,
                    first.data_source
                );
                continue;
            }
        }
        reports.push(report);
    }
    if reports.is_empty() {
        return Err(Failure::Usage("no usable run reports".into()));
    }
    let rows = artifacts::summarize(&reports);
    print!("{}", artifacts::render_table(&rows));
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)
            .map_err(|e| Failure::Runtime(format!("create {}: {}", dir.display(), e)))?;
        artifacts::write_summary_csv(&dir.join("summary.csv"), &rows)
            .map_err(|e| Failure::Runtime(format!("write summary: {}", e)))?;
    }
    Ok(())
}
