//! Per-task evaluation results and the `metrics.csv` format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `None` for the pooled aggregate over all seen tasks.
    pub eval_task: Option<usize>,
    pub accuracy: f64,
    pub loss: f64,
    pub correct: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task_id: usize,
    /// One entry per task seen so far, in task order.
    pub evaluations: Vec<EvalResult>,
    pub aggregate: EvalResult,
    /// Mean composite loss over the final epoch.
    pub train_loss: f64,
    pub wall_ms: f64,
}

impl TaskMetrics {
    pub fn accuracy_on(&self, task: usize) -> Option<f64> {
        self.evaluations
            .iter()
            .find(|e| e.eval_task == Some(task))
            .map(|e| e.accuracy)
    }

    /// Accuracy on the task just trained.
    pub fn current_accuracy(&self) -> f64 {
        self.accuracy_on(self.task_id).unwrap_or(0.0)
    }
}

/// Mean over tasks of the post-task aggregate accuracy.
pub fn avg_accuracy(metrics: &[TaskMetrics]) -> f64 {
    if metrics.is_empty() {
        return 0.0;
    }
    metrics.iter().map(|m| m.aggregate.accuracy).sum::<f64>() / metrics.len() as f64
}

pub const METRICS_HEADER: [&str; 5] = ["task_id", "eval_task", "accuracy", "loss", "wall_ms"];

/// One row of `metrics.csv`. `eval_task` is a task index or `all`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub task_id: usize,
    pub eval_task: String,
    pub accuracy: f64,
    pub loss: f64,
    pub wall_ms: f64,
}

pub const AGGREGATE_LABEL: &str = "all";

/// Writes one row per seen task plus an `all` row, per trained task.
/// Wall time is written as 0 unless `record_wall_time`, which keeps the file
/// byte-identical across reruns.
pub fn write_metrics_csv<W: Write>(w: W, metrics: &[TaskMetrics], record_wall_time: bool) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_HEADER)?;
    for m in metrics {
        let wall = if record_wall_time {
            format!("{:.3}", m.wall_ms)
        } else {
            "0".to_owned()
        };
        for e in m.evaluations.iter().chain(std::iter::once(&m.aggregate)) {
            let eval = e
                .eval_task
                .map_or_else(|| AGGREGATE_LABEL.to_owned(), |t| t.to_string());
            out.write_record([
                m.task_id.to_string(),
                eval,
                format!("{:.6}", e.accuracy),
                format!("{:.6}", e.loss),
                wall.clone(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(r: R) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_reader(r);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header != METRICS_HEADER {
        return Err(Error::Comparison(format!("unexpected metrics header {header:?}")));
    }
    reader
        .deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub fn read_metrics_file(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    read_metrics_csv(std::fs::File::open(path)?)
}

/// Side-by-side per-task aggregate accuracy and AVG for several runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub names: Vec<String>,
    pub tasks: Vec<usize>,
    /// `aggregate[run][task]`.
    pub aggregate: Vec<Vec<f64>>,
    pub avg: Vec<f64>,
}

impl Comparison {
    /// `run − baseline` per task, baseline being the first run.
    pub fn deltas(&self, run: usize) -> Vec<f64> {
        self.aggregate[run]
            .iter()
            .zip(&self.aggregate[0])
            .map(|(a, b)| a - b)
            .collect()
    }

    pub fn avg_delta(&self, run: usize) -> f64 {
        self.avg[run] - self.avg[0]
    }

    pub fn to_text(&self) -> String {
        let width = self.names.iter().map(String::len).max().unwrap_or(3).max(8);
        let mut s = format!("{:<width$}", "run");
        for t in &self.tasks {
            s += &format!(" {:>9}", format!("T{t}"));
        }
        s += &format!(" {:>9} {:>9}\n", "AVG", "dAVG");
        for (i, name) in self.names.iter().enumerate() {
            s += &format!("{name:<width$}");
            for v in &self.aggregate[i] {
                s += &format!(" {:>9.4}", v);
            }
            s += &format!(" {:>9.4} {:>+9.4}\n", self.avg[i], self.avg_delta(i));
        }
        s
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["run", "task_id", "aggregate_accuracy", "delta"])?;
        for (i, name) in self.names.iter().enumerate() {
            let deltas = self.deltas(i);
            for (j, t) in self.tasks.iter().enumerate() {
                out.write_record([
                    name.clone(),
                    t.to_string(),
                    format!("{:.6}", self.aggregate[i][j]),
                    format!("{:.6}", deltas[j]),
                ])?;
            }
            out.write_record([
                name.clone(),
                "AVG".to_owned(),
                format!("{:.6}", self.avg[i]),
                format!("{:.6}", self.avg_delta(i)),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Compares runs with identical schedules (same `(task_id, eval_task)`
/// rows). AVG is the mean over tasks of the `all` row.
pub fn compare_runs(runs: &[(String, Vec<MetricsRow>)]) -> Result<Comparison> {
    if runs.len() < 2 {
        return Err(Error::Comparison("need at least two metric files".into()));
    }
    let keys = |rows: &[MetricsRow]| -> Vec<(usize, String)> {
        rows.iter().map(|r| (r.task_id, r.eval_task.clone())).collect()
    };
    let reference = keys(&runs[0].1);
    for (name, rows) in &runs[1..] {
        if keys(rows) != reference {
            return Err(Error::Comparison(format!(
                "{name} has a different task schedule than {}",
                runs[0].0
            )));
        }
    }
    let mut aggregate = Vec::with_capacity(runs.len());
    let mut tasks = Vec::new();
    for (name, rows) in runs {
        let per_task: BTreeMap<usize, f64> = rows
            .iter()
            .filter(|r| r.eval_task == AGGREGATE_LABEL)
            .map(|r| (r.task_id, r.accuracy))
            .collect();
        if per_task.is_empty() {
            return Err(Error::Comparison(format!("{name} has no aggregate rows")));
        }
        tasks = per_task.keys().copied().collect();
        aggregate.push(per_task.into_values().collect::<Vec<_>>());
    }
    let avg = aggregate
        .iter()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    Ok(Comparison {
        names: runs.iter().map(|(n, _)| n.clone()).collect(),
        tasks,
        aggregate,
        avg,
    })
}
