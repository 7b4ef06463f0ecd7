//! Run configuration: TOML parsing, validation with field-level messages,
//! default resolution, and the resolved-config echo written into every run
//! directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sgl0_core::model::GroupingMode;
use sgl0_core::optimizer::{OptMethod, OptimizerSpec};
use sgl0_core::regularizers::{RegularizerKind, RegularizerSpec};
use sgl0_core::trainer::TrainSettings;

/// Environment variable naming the default dataset directory.
pub const DATA_DIR_ENV: &str = "SGL0_DATA_DIR";

/// Default initial coupling weight when the config omits `beta0`
/// (2.5 scaled by the MNIST training-set size).
const DEFAULT_BETA0: f64 = 2.5 / 60_000.0;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: RawModel,
    data: RawData,
    regularizer: RawRegularizer,
    #[serde(default)]
    optimizer: RawOptimizer,
    training: RawTraining,
    #[serde(default)]
    metrics: RawMetrics,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    arch: String,
    sizes: Option<Vec<usize>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    source: String,
    dir: Option<PathBuf>,
    classes: Option<usize>,
    dim: Option<usize>,
    per_class: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegularizer {
    kind: String,
    lambda: Option<f64>,
    beta0: Option<f64>,
    sigma: Option<f64>,
    beta_interval_epochs: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptimizer {
    method: Option<String>,
    learning_rate: Option<f64>,
    lr_decay: Option<f64>,
    lr_decay_interval_epochs: Option<u64>,
    adam_beta1: Option<f64>,
    adam_beta2: Option<f64>,
    adam_epsilon: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTraining {
    epochs: u64,
    batch_size: Option<usize>,
    seed: Option<u64>,
    grouping: Option<String>,
    precision: Option<String>,
    probe_size: Option<usize>,
    eval_batch_size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMetrics {
    weight_threshold: Option<f64>,
    neuron_threshold: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
}

/// Which network to build.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchSpec {
    LeNet5Caffe,
    Mlp(Vec<usize>),
}

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSpec {
    Mnist {
        dir: PathBuf,
    },
    Synthetic {
        classes: usize,
        dim: usize,
        per_class: usize,
    },
}

/// A fully validated run configuration with every default filled in.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub arch: ArchSpec,
    pub data: DataSpec,
    pub settings: TrainSettings,
    pub out_dir: PathBuf,
    /// TOML text of the resolved configuration (the echo artifact).
    pub echo: String,
}

fn fail(section: &str, msg: impl std::fmt::Display) -> String {
    format!("[{}] {}", section, msg)
}

fn parse_kind(s: &str) -> Result<RegularizerKind, String> {
    Ok(match s {
        "none" => RegularizerKind::None,
        "l1" => RegularizerKind::L1,
        "l0" => RegularizerKind::L0,
        "group-lasso" => RegularizerKind::GroupLasso,
        "sparse-group-lasso" => RegularizerKind::SparseGroupLasso,
        "sparse-group-l0asso" => RegularizerKind::SparseGroupL0asso,
        other => {
            return Err(fail(
                "regularizer",
                format!(
                    "unknown kind {:?}; expected none|l1|l0|group-lasso|sparse-group-lasso|sparse-group-l0asso",
                    other
                ),
            ))
        }
    })
}

fn kind_name(kind: RegularizerKind) -> &'static str {
    match kind {
        RegularizerKind::None => "none",
        RegularizerKind::L1 => "l1",
        RegularizerKind::L0 => "l0",
        RegularizerKind::GroupLasso => "group-lasso",
        RegularizerKind::SparseGroupLasso => "sparse-group-lasso",
        RegularizerKind::SparseGroupL0asso => "sparse-group-l0asso",
    }
}

/// Sections of the resolved-config echo; every effective value appears.
#[derive(Serialize)]
struct Echo {
    model: EchoModel,
    data: EchoData,
    regularizer: EchoRegularizer,
    optimizer: EchoOptimizer,
    training: EchoTraining,
    metrics: EchoMetrics,
    output: EchoOutput,
}

#[derive(Serialize)]
struct EchoModel {
    arch: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    sizes: Option<Vec<usize>>,
}

#[derive(Serialize)]
struct EchoData {
    source: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    dir: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_class: Option<usize>,
}

#[derive(Serialize)]
struct EchoRegularizer {
    kind: String,
    lambda: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta_interval_epochs: Option<u64>,
}

#[derive(Serialize)]
struct EchoOptimizer {
    method: String,
    learning_rate: f64,
    lr_decay: f64,
    lr_decay_interval_epochs: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    adam_beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    adam_beta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    adam_epsilon: Option<f64>,
}

#[derive(Serialize)]
struct EchoTraining {
    epochs: u64,
    batch_size: usize,
    seed: u64,
    grouping: String,
    precision: String,
    probe_size: usize,
    eval_batch_size: usize,
}

#[derive(Serialize)]
struct EchoMetrics {
    weight_threshold: f64,
    neuron_threshold: f64,
}

#[derive(Serialize)]
struct EchoOutput {
    dir: String,
}

/// Parse `path`, apply CLI overrides, validate everything, and fill defaults.
/// Every failure is a usage-level message naming the offending section.
pub fn load(
    path: &Path,
    seed_override: Option<u64>,
    out_override: Option<PathBuf>,
) -> Result<Resolved, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {}", path.display(), e))?;
    let raw: RawConfig =
        toml::from_str(&text).map_err(|e| format!("config {}: {}", path.display(), e))?;
    let config_dir = path.parent().unwrap_or_else(|| Path::new("."));

    // model
    let arch = match raw.model.arch.as_str() {
        "lenet5-caffe" => {
            if raw.model.sizes.is_some() {
                return Err(fail("model", "sizes only applies to arch = \"mlp\""));
            }
            ArchSpec::LeNet5Caffe
        }
        "mlp" => {
            let sizes = raw
                .model
                .sizes
                .ok_or_else(|| fail("model", "arch = \"mlp\" requires sizes"))?;
            if sizes.len() < 2 {
                return Err(fail("model", "mlp sizes needs at least 2 entries"));
            }
            if sizes.iter().any(|&s| s < 1) {
                return Err(fail("model", "mlp sizes must all be >= 1"));
            }
            ArchSpec::Mlp(sizes)
        }
        other => {
            return Err(fail(
                "model",
                format!("unknown arch {:?}; expected lenet5-caffe|mlp", other),
            ))
        }
    };

    // data
    let data = match raw.data.source.as_str() {
        "mnist" => {
            for (name, set) in [
                ("classes", raw.data.classes.is_some()),
                ("dim", raw.data.dim.is_some()),
                ("per_class", raw.data.per_class.is_some()),
            ] {
                if set {
                    return Err(fail(
                        "data",
                        format!("{} only applies to source = \"synthetic\"", name),
                    ));
                }
            }
            let dir = match raw.data.dir {
                Some(d) if d.is_absolute() => d,
                Some(d) => config_dir.join(d),
                None => match std::env::var_os(DATA_DIR_ENV) {
                    Some(d) => PathBuf::from(d),
                    None => {
                        return Err(fail(
                            "data",
                            format!(
                                "source = \"mnist\" needs dir (or the {} environment variable)",
                                DATA_DIR_ENV
                            ),
                        ))
                    }
                },
            };
            DataSpec::Mnist { dir }
        }
        "synthetic" => {
            if raw.data.dir.is_some() {
                return Err(fail("data", "dir only applies to source = \"mnist\""));
            }
            let classes = raw.data.classes.unwrap_or(3);
            let dim = raw.data.dim.unwrap_or(8);
            let per_class = raw.data.per_class.unwrap_or(50);
            if classes < 1 || dim < 1 || per_class < 1 {
                return Err(fail("data", "classes, dim, and per_class must be >= 1"));
            }
            DataSpec::Synthetic {
                classes,
                dim,
                per_class,
            }
        }
        other => {
            return Err(fail(
                "data",
                format!("unknown source {:?}; expected mnist|synthetic", other),
            ))
        }
    };

    // model/data compatibility
    match (&arch, &data) {
        (ArchSpec::LeNet5Caffe, DataSpec::Synthetic { .. }) => {
            return Err(fail(
                "model",
                "lenet5-caffe requires data source = \"mnist\"",
            ))
        }
        (ArchSpec::Mlp(sizes), DataSpec::Mnist { .. }) => {
            if sizes[0] != 784 || *sizes.last().unwrap() != 10 {
                return Err(fail(
                    "model",
                    format!(
                        "mlp on mnist must map 784 inputs to 10 classes, got {} to {}",
                        sizes[0],
                        sizes.last().unwrap()
                    ),
                ));
            }
        }
        (ArchSpec::Mlp(sizes), DataSpec::Synthetic { classes, dim, .. }) => {
            if sizes[0] != *dim || sizes.last().unwrap() != classes {
                return Err(fail(
                    "model",
                    format!(
                        "mlp must map dim {} to {} classes, got {} to {}",
                        dim,
                        classes,
                        sizes[0],
                        sizes.last().unwrap()
                    ),
                ));
            }
        }
        (ArchSpec::LeNet5Caffe, DataSpec::Mnist { .. }) => {}
    }

    // regularizer
    let kind = parse_kind(&raw.regularizer.kind)?;
    let lambda = raw.regularizer.lambda.unwrap_or(0.0);
    let regularizer = RegularizerSpec::new(kind, lambda).map_err(|e| fail("regularizer", e))?;
    let beta0 = raw.regularizer.beta0.unwrap_or(DEFAULT_BETA0);
    let sigma = raw.regularizer.sigma.unwrap_or(1.25);
    let beta_interval = raw.regularizer.beta_interval_epochs.unwrap_or(40);
    let pd = matches!(
        kind,
        RegularizerKind::L0 | RegularizerKind::SparseGroupL0asso
    );
    if !pd {
        for (name, set) in [
            ("beta0", raw.regularizer.beta0.is_some()),
            ("sigma", raw.regularizer.sigma.is_some()),
            (
                "beta_interval_epochs",
                raw.regularizer.beta_interval_epochs.is_some(),
            ),
        ] {
            if set {
                return Err(fail(
                    "regularizer",
                    format!("{} only applies to the l0 kinds", name),
                ));
            }
        }
    }

    // optimizer
    let method = match raw.optimizer.method.as_deref().unwrap_or("adam") {
        "adam" => OptMethod::Adam {
            beta1: raw.optimizer.adam_beta1.unwrap_or(0.9),
            beta2: raw.optimizer.adam_beta2.unwrap_or(0.999),
            epsilon: raw.optimizer.adam_epsilon.unwrap_or(1e-8),
        },
        "sgd" => {
            for (name, set) in [
                ("adam_beta1", raw.optimizer.adam_beta1.is_some()),
                ("adam_beta2", raw.optimizer.adam_beta2.is_some()),
                ("adam_epsilon", raw.optimizer.adam_epsilon.is_some()),
            ] {
                if set {
                    return Err(fail(
                        "optimizer",
                        format!("{} only applies to method = \"adam\"", name),
                    ));
                }
            }
            OptMethod::Sgd
        }
        other => {
            return Err(fail(
                "optimizer",
                format!("unknown method {:?}; expected sgd|adam", other),
            ))
        }
    };
    let optimizer = OptimizerSpec {
        method,
        lr0: raw.optimizer.learning_rate.unwrap_or(0.001),
        lr_decay: raw.optimizer.lr_decay.unwrap_or(0.1),
        lr_decay_interval: raw.optimizer.lr_decay_interval_epochs.unwrap_or(40),
    };
    optimizer.validate().map_err(|e| fail("optimizer", e))?;

    // training
    let grouping = match raw.training.grouping.as_deref().unwrap_or("input") {
        "input" => GroupingMode::Input,
        "output" => GroupingMode::Output,
        other => {
            return Err(fail(
                "training",
                format!("unknown grouping {:?}; expected input|output", other),
            ))
        }
    };
    let precision = raw.training.precision.unwrap_or_else(|| "f64".to_string());
    if precision != "f64" {
        return Err(fail(
            "training",
            format!(
                "precision {:?} unsupported; this build is f64-only",
                precision
            ),
        ));
    }
    let seed = seed_override.or(raw.training.seed).unwrap_or(1);

    let settings = TrainSettings {
        epochs: raw.training.epochs,
        batch_size: raw.training.batch_size.unwrap_or(128),
        seed,
        regularizer,
        optimizer,
        grouping,
        beta0,
        sigma,
        beta_interval,
        weight_threshold: raw.metrics.weight_threshold.unwrap_or(1e-5),
        neuron_threshold: raw.metrics.neuron_threshold.unwrap_or(1e-5),
        probe_size: raw.training.probe_size.unwrap_or(512),
        eval_batch_size: raw.training.eval_batch_size.unwrap_or(256),
    };
    settings.validate().map_err(|e| fail("training", e))?;

    // output
    let out_dir = match out_override.or(raw.output.dir) {
        Some(d) => d,
        None => {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".to_string());
            PathBuf::from("runs").join(format!("{}-seed{}", stem, seed))
        }
    };

    let echo = Echo {
        model: EchoModel {
            arch: raw.model.arch.clone(),
            sizes: match &arch {
                ArchSpec::Mlp(sizes) => Some(sizes.clone()),
                ArchSpec::LeNet5Caffe => None,
            },
        },
        data: match &data {
            DataSpec::Mnist { dir } => EchoData {
                source: "mnist".into(),
                dir: Some(dir.display().to_string()),
                classes: None,
                dim: None,
                per_class: None,
            },
            DataSpec::Synthetic {
                classes,
                dim,
                per_class,
            } => EchoData {
                source: "synthetic".into(),
                dir: None,
                classes: Some(*classes),
                dim: Some(*dim),
                per_class: Some(*per_class),
            },
        },
        regularizer: EchoRegularizer {
            kind: kind_name(kind).into(),
            lambda,
            beta0: pd.then_some(beta0),
            sigma: pd.then_some(sigma),
            beta_interval_epochs: pd.then_some(beta_interval),
        },
        optimizer: EchoOptimizer {
            method: match method {
                OptMethod::Sgd => "sgd".into(),
                OptMethod::Adam { .. } => "adam".into(),
            },
            learning_rate: optimizer.lr0,
            lr_decay: optimizer.lr_decay,
            lr_decay_interval_epochs: optimizer.lr_decay_interval,
            adam_beta1: match method {
                OptMethod::Adam { beta1, .. } => Some(beta1),
                OptMethod::Sgd => None,
            },
            adam_beta2: match method {
                OptMethod::Adam { beta2, .. } => Some(beta2),
                OptMethod::Sgd => None,
            },
            adam_epsilon: match method {
                OptMethod::Adam { epsilon, .. } => Some(epsilon),
                OptMethod::Sgd => None,
            },
        },
        training: EchoTraining {
            epochs: settings.epochs,
            batch_size: settings.batch_size,
            seed,
            grouping: match grouping {
                GroupingMode::Input => "input".into(),
                GroupingMode::Output => "output".into(),
            },
            precision,
            probe_size: settings.probe_size,
            eval_batch_size: settings.eval_batch_size,
        },
        metrics: EchoMetrics {
            weight_threshold: settings.weight_threshold,
            neuron_threshold: settings.neuron_threshold,
        },
        output: EchoOutput {
            dir: out_dir.display().to_string(),
        },
    };
    let echo = toml::to_string_pretty(&echo).map_err(|e| format!("echo serialization: {}", e))?;

    Ok(Resolved {
        arch,
        data,
        settings,
        out_dir,
        echo,
    })
}

/// Stable name of a regularizer kind as used in configs and reports.
pub fn regularizer_name(kind: RegularizerKind) -> &'static str {
    kind_name(kind)
}
