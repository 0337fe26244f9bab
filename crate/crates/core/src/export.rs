//! Run artifacts: summary CSVs, per-sample CSVs and the JSON report.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{HeadKind, Scales};
use crate::rollout::{SummaryRow, TrainingConfig, TrajectoryBatch, EVAL_STREAM};

pub const TRAJECTORIES: &str = "trajectories.csv";
pub const SAMPLES: &str = "samples.csv";
pub const CHECKPOINT: &str = "checkpoint.txt";
pub const REPORT: &str = "report.json";

/// Samples written individually to `samples.csv`.
pub const SAMPLE_ROWS: usize = 64;

pub const MFG_COLUMNS: [&str; 7] = ["t", "muX_mean", "muX_p05", "muX_p95", "muY_mean", "alpha_mean", "price_mean"];
pub const PLANNER_COLUMNS: [&str; 10] = [
    "t", "muX_mean", "muX_p05", "muX_p95", "phi_mean", "V_mean", "v_hat_mean", "alpha_mean", "D", "price_mean",
];

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

pub fn write_mfg_trajectories(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    write_rows(
        path,
        &MFG_COLUMNS,
        summary
            .iter()
            .map(|r| vec![r.t, r.x_mean, r.x_p05, r.x_p95, r.y_mean, r.alpha_mean, r.price_mean]),
    )
}

pub fn write_planner_trajectories(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    write_rows(
        path,
        &PLANNER_COLUMNS,
        summary.iter().map(|r| {
            vec![
                r.t,
                r.x_mean,
                r.x_p05,
                r.x_p95,
                r.y_mean,
                r.value_mean,
                r.subsidy_mean,
                r.alpha_mean,
                r.demand,
                r.price_mean,
            ]
        }),
    )
}

/// Per-sample values for the first [`SAMPLE_ROWS`] evaluation samples.
pub fn write_samples(path: &Path, batch: &TrajectoryBatch, planner: bool) -> Result<()> {
    let n = batch.batch.min(SAMPLE_ROWS);
    let header: &[&str] = if planner {
        &["sample", "t", "muX", "phi", "z_phi", "alpha", "price", "v_hat", "V", "zV", "D"]
    } else {
        &["sample", "t", "muX", "muY", "z", "alpha", "price"]
    };
    let rows = (0..n).flat_map(|j| {
        (0..=batch.steps).map(move |i| {
            let k = batch.index(j, i);
            let mut row = vec![j as f64, batch.times[i], batch.x[k], batch.y[k], batch.z[k], batch.alpha[k], batch.price[k]];
            if planner {
                row.extend([batch.subsidy[k], batch.value[k], batch.z_value[k], batch.demand[i]]);
            }
            row
        })
    });
    write_rows(path, header, rows)
}

/// Reads a CSV written by this module into its header and numeric rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| Error::format(path, format!("`{f}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub train: u64,
    /// Training iteration `k` reads noise stream `k`.
    pub train_streams: String,
    pub eval_stream: u32,
    pub eval_batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchInfo {
    pub hidden: Vec<usize>,
    pub activation: String,
    pub head: HeadKind,
    pub inputs: String,
}

/// Everything needed to reproduce and audit a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub solver: String,
    pub scenario: serde_json::Value,
    pub config: TrainingConfig,
    pub seeds: Seeds,
    pub arch: ArchInfo,
    pub scales: Scales,
    pub loss_traces: BTreeMap<String, Vec<f64>>,
    pub final_losses: BTreeMap<String, f64>,
    /// Losses on the evaluation rollout.
    pub eval_losses: BTreeMap<String, f64>,
    pub initial_values: BTreeMap<String, f64>,
    /// Iterations at which the divergence guard restarted training.
    pub restarts: Vec<usize>,
    /// Planner only: largest observed `|d v_hat / dx|`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback_lipschitz: Option<f64>,
    pub threads: usize,
    pub wall_clock_secs: f64,
}

impl SolveReport {
    pub fn new<S: Serialize>(solver: &str, scenario: &S, cfg: &TrainingConfig, scales: &Scales, head: HeadKind) -> Self {
        SolveReport {
            solver: solver.to_string(),
            scenario: serde_json::to_value(scenario).unwrap_or(serde_json::Value::Null),
            config: cfg.clone(),
            seeds: Seeds {
                train: cfg.seed,
                train_streams: format!("0..{}", cfg.iterations),
                eval_stream: EVAL_STREAM,
                eval_batch: cfg.eval_samples(),
            },
            arch: ArchInfo {
                hidden: cfg.hidden.clone(),
                activation: "tanh".into(),
                head,
                inputs: "(t / T, (x - x_center) / x_half)".into(),
            },
            scales: *scales,
            loss_traces: BTreeMap::new(),
            final_losses: BTreeMap::new(),
            eval_losses: BTreeMap::new(),
            initial_values: BTreeMap::new(),
            restarts: Vec::new(),
            feedback_lipschitz: None,
            threads: rayon::current_num_threads(),
            wall_clock_secs: 0.0,
        }
    }

    pub fn add_trace(&mut self, name: &str, trace: Vec<f64>) {
        if let Some(last) = trace.last() {
            self.final_losses.insert(name.to_string(), *last);
        }
        self.loss_traces.insert(name.to_string(), trace);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![SummaryRow {
            t: 0.1,
            x_mean: 1000.0 / 3.0,
            x_p05: 1.0,
            x_p50: 2.0,
            x_p95: 3.0,
            y_mean: -0.5,
            alpha_mean: 1e-300,
            price_mean: 300.0,
            subsidy_mean: 0.0,
            value_mean: 0.0,
            demand: 1500.0,
        }];
        write_mfg_trajectories(&path, &rows).unwrap();
        let (header, data) = read_csv(&path).unwrap();
        assert_eq!(header, MFG_COLUMNS);
        assert_eq!(data, vec![vec![0.1, 1000.0 / 3.0, 1.0, 3.0, -0.5, 1e-300, 300.0]]);
    }

    #[test]
    fn missing_directory_names_path() {
        let err = write_mfg_trajectories(Path::new("/nonexistent/dir/x.csv"), &[]).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/x.csv"), "{err}");
    }
}
