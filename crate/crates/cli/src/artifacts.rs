//! Run-directory artifacts: the per-epoch CSV, the timing sidecar, the final
//! JSON report, and the cross-run aggregation behind `sgl0 report`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sgl0_core::trainer::TrainRecord;

/// Bumped whenever the report layout changes incompatibly.
pub const REPORT_SCHEMA: u32 = 1;

/// Column order of `records.csv`. Wall time deliberately lives in
/// `timing.csv`: the records file must be byte-identical across repeated
/// runs of the same config and seed, and elapsed time never is.
pub const RECORDS_HEADER: &str =
    "epoch,train_loss,probe_objective,test_error_pct,weight_sparsity_pct,neuron_sparsity_pct,beta,learning_rate";

pub const TIMING_HEADER: &str = "epoch,wall_time_s";

/// Incremental writer for `records.csv` + `timing.csv`, flushing after each
/// epoch so an aborted run still leaves every finished row on disk.
pub struct EpochLog {
    records: BufWriter<File>,
    timing: BufWriter<File>,
}

impl EpochLog {
    pub fn create(run_dir: &Path) -> std::io::Result<Self> {
        let mut records = BufWriter::new(File::create(run_dir.join("records.csv"))?);
        let mut timing = BufWriter::new(File::create(run_dir.join("timing.csv"))?);
        writeln!(records, "{}", RECORDS_HEADER)?;
        writeln!(timing, "{}", TIMING_HEADER)?;
        records.flush()?;
        timing.flush()?;
        Ok(Self { records, timing })
    }

    pub fn append(&mut self, r: &TrainRecord) -> std::io::Result<()> {
        writeln!(
            self.records,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            r.train_loss,
            r.probe_objective,
            r.test_error_pct,
            r.weight_sparsity_pct,
            r.neuron_sparsity_pct,
            r.beta,
            r.learning_rate
        )?;
        writeln!(self.timing, "{},{}", r.epoch, r.wall_time_s)?;
        self.records.flush()?;
        self.timing.flush()
    }
}

/// Flat summary of one finished run; serialized as `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub version: String,
    pub command: String,
    pub arch: String,
    pub data_source: String,
    pub regularizer: String,
    pub lambda: f64,
    pub grouping: String,
    pub seed: u64,
    pub epochs: u64,
    pub weight_threshold: f64,
    pub neuron_threshold: f64,
    pub test_error_pct: f64,
    pub weight_sparsity_pct: f64,
    pub neuron_sparsity_pct: f64,
    pub total_params: usize,
    pub total_groups: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_train_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_probe_objective: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_total_s: Option<f64>,
    pub config_sha256: String,
}

pub fn write_json(path: &Path, report: &RunReport) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text)
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for a single
/// observation).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    assert!(n > 0, "mean_std needs at least one observation");
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Aggregated statistics for one regularizer across runs.
#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub regularizer: String,
    pub runs: usize,
    pub test_error_mean: f64,
    pub test_error_std: f64,
    pub weight_sparsity_mean: f64,
    pub weight_sparsity_std: f64,
    pub neuron_sparsity_mean: f64,
    pub neuron_sparsity_std: f64,
}

/// Group per-run reports by regularizer and compute mean [std] for the three
/// headline metrics. Order is deterministic (alphabetical by regularizer).
pub fn summarize(reports: &[RunReport]) -> Vec<MethodSummary> {
    let mut by_kind: BTreeMap<String, Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        by_kind.entry(r.regularizer.clone()).or_default().push(r);
    }
    by_kind
        .into_iter()
        .map(|(regularizer, rs)| {
            let errs: Vec<f64> = rs.iter().map(|r| r.test_error_pct).collect();
            let ws: Vec<f64> = rs.iter().map(|r| r.weight_sparsity_pct).collect();
            let ns: Vec<f64> = rs.iter().map(|r| r.neuron_sparsity_pct).collect();
            let (test_error_mean, test_error_std) = mean_std(&errs);
            let (weight_sparsity_mean, weight_sparsity_std) = mean_std(&ws);
            let (neuron_sparsity_mean, neuron_sparsity_std) = mean_std(&ns);
            MethodSummary {
                regularizer,
                runs: rs.len(),
                test_error_mean,
                test_error_std,
                weight_sparsity_mean,
                weight_sparsity_std,
                neuron_sparsity_mean,
                neuron_sparsity_std,
            }
        })
        .collect()
}

/// Render the summary the way results tables are usually laid out: one row
/// per method, "mean [std]" cells.
pub fn render_table(rows: &[MethodSummary]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<22} {:>4}  {:>22}  {:>22}  {:>22}\n",
        "method", "runs", "weight sparsity %", "neuron sparsity %", "test error %"
    ));
    for row in rows {
        let cell = |m: f64, s: f64| format!("{:.2} [{:.2}]", m, s);
        out.push_str(&format!(
            "{:<22} {:>4}  {:>22}  {:>22}  {:>22}\n",
            row.regularizer,
            row.runs,
            cell(row.weight_sparsity_mean, row.weight_sparsity_std),
            cell(row.neuron_sparsity_mean, row.neuron_sparsity_std),
            cell(row.test_error_mean, row.test_error_std),
        ));
    }
    out
}

pub fn write_summary_csv(path: &Path, rows: &[MethodSummary]) -> std::io::Result<()> {
    let mut out = String::from(
        "regularizer,runs,weight_sparsity_mean,weight_sparsity_std,neuron_sparsity_mean,neuron_sparsity_std,test_error_mean,test_error_std\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.regularizer,
            r.runs,
            r.weight_sparsity_mean,
            r.weight_sparsity_std,
            r.neuron_sparsity_mean,
            r.neuron_sparsity_std,
            r.test_error_mean,
            r.test_error_std
        ));
    }
    std::fs::write(path, out)
}
