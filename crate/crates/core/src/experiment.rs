//! Experiment configuration and seeded end-to-end runs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::continual::{LossWeights, ThresholdScope};
use crate::data::{
    generate_synthetic, load_csv, make_cil_schedule, make_fil_schedule, partition_vertically, DataSplit,
    PartitionSpec, SyntheticSpec, TaskMode, TaskSchedule, TrainingPlan, VerticalDataset,
};
use crate::error::{Error, Result};
use crate::metrics::{write_metrics_csv, TaskMetrics};
use crate::prototype::PrototypeRecord;
use crate::protocol::{Execution, Federation, FederationConfig, FisherDump, LmoConfig, RoundMessage};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Csv {
        path: PathBuf,
        label_column: String,
        /// Defaults to an even split over `k_parties`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        partition: Option<PartitionSpec>,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSpec {
            n_samples: 2000,
            n_features: 16,
            n_classes: 8,
            class_separation: 4.0,
        })
    }
}

/// Component switches; each `true` disables one mechanism.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_ce: bool,
    pub no_a: bool,
    pub no_f: bool,
    pub no_lmo: bool,
}

impl Ablation {
    /// Everything off: plain sequential VFL fine-tuning.
    pub const NAIVE: Ablation = Ablation {
        no_ce: false,
        no_a: true,
        no_f: true,
        no_lmo: true,
    };
}

/// Extra knobs for local model optimisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmoOptions {
    pub scope: ThresholdScope,
    pub max_frozen_fraction: f64,
    pub accumulate: bool,
    pub fisher_max_samples: Option<usize>,
}

impl Default for LmoOptions {
    fn default() -> Self {
        let d = LmoConfig::default();
        Self {
            scope: d.scope,
            max_frozen_fraction: d.max_frozen_fraction,
            accumulate: d.accumulate,
            fisher_max_samples: d.fisher_max_samples,
        }
    }
}

/// A full run description. Every field has a default, so `{"mode":"CIL"}`
/// is a complete config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub k_parties: usize,
    pub d_emb: usize,
    pub local_hidden: Vec<usize>,
    pub server_hidden: Vec<usize>,
    pub mode: TaskMode,
    pub n_tasks: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_ce: f64,
    pub lambda_a: f64,
    pub lambda_f: f64,
    pub gamma: f64,
    pub beta: f64,
    pub k0: f64,
    pub alpha: f64,
    pub jitter_sigma: f64,
    pub ablation: Ablation,
    pub lmo: LmoOptions,
    pub test_fraction: f64,
    pub execution: Execution,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub record_wall_time: bool,
    pub trace_limit: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            k_parties: 4,
            d_emb: 16,
            local_hidden: vec![32],
            server_hidden: vec![32],
            mode: TaskMode::Cil,
            n_tasks: 4,
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            lambda_ce: 0.5,
            lambda_a: 0.5,
            lambda_f: 0.5,
            gamma: 0.1,
            beta: 0.5,
            k0: 15.0,
            alpha: 3.0,
            jitter_sigma: 0.0,
            ablation: Ablation::default(),
            lmo: LmoOptions::default(),
            test_fraction: 0.2,
            execution: Execution::Sequential,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            record_wall_time: false,
            trace_limit: 10_000,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::config(name, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        positive("k_parties", self.k_parties)?;
        positive("d_emb", self.d_emb)?;
        positive("n_tasks", self.n_tasks)?;
        positive("epochs", self.epochs)?;
        positive("batch_size", self.batch_size)?;
        if self.local_hidden.contains(&0) {
            return Err(Error::config("local_hidden", "widths must be at least 1"));
        }
        if self.server_hidden.contains(&0) {
            return Err(Error::config("server_hidden", "widths must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        for (name, v) in [
            ("lambda_ce", self.lambda_ce),
            ("lambda_a", self.lambda_a),
            ("lambda_f", self.lambda_f),
            ("gamma", self.gamma),
            ("jitter_sigma", self.jitter_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config("beta", "must lie in [0, 1]"));
        }
        if !self.k0.is_finite() || !self.alpha.is_finite() {
            return Err(Error::config("k0", "k0 and alpha must be finite"));
        }
        if !(0.0..=1.0).contains(&self.lmo.max_frozen_fraction) {
            return Err(Error::config("lmo.max_frozen_fraction", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("test_fraction", "must lie in [0, 1)"));
        }
        if let DatasetSource::Synthetic(s) = &self.dataset {
            if s.n_samples == 0 || s.n_features == 0 || s.n_classes == 0 {
                return Err(Error::config("dataset.synthetic", "counts must be at least 1"));
            }
            if self.k_parties > s.n_features {
                return Err(Error::config(
                    "k_parties",
                    format!("{} parties exceed {} features", self.k_parties, s.n_features),
                ));
            }
            if self.mode == TaskMode::Cil && self.n_tasks > s.n_classes {
                return Err(Error::config(
                    "n_tasks",
                    format!("{} CIL tasks exceed {} classes", self.n_tasks, s.n_classes),
                ));
            }
        }
        Ok(())
    }

    /// Loss weights after ablation switches.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_ce: if self.ablation.no_ce { 0.0 } else { self.lambda_ce },
            lambda_a: if self.ablation.no_a { 0.0 } else { self.lambda_a },
            lambda_f: if self.ablation.no_f { 0.0 } else { self.lambda_f },
        }
    }

    pub fn federation_config(&self) -> FederationConfig {
        FederationConfig {
            d_emb: self.d_emb,
            local_hidden: self.local_hidden.clone(),
            server_hidden: self.server_hidden.clone(),
            lr: self.lr,
            weights: self.loss_weights(),
            gamma: self.gamma,
            beta: self.beta,
            jitter_sigma: self.jitter_sigma,
            lmo: LmoConfig {
                enabled: !self.ablation.no_lmo,
                k0: self.k0,
                alpha: self.alpha,
                scope: self.lmo.scope,
                max_frozen_fraction: self.lmo.max_frozen_fraction,
                accumulate: self.lmo.accumulate,
                fisher_max_samples: self.lmo.fisher_max_samples,
            },
            execution: self.execution,
            seed: self.seed,
            trace_limit: self.trace_limit,
        }
    }

    pub fn load_dataset(&self) -> Result<VerticalDataset> {
        match &self.dataset {
            DatasetSource::Synthetic(spec) => {
                let ds = generate_synthetic(spec, self.seed)?;
                let partition = partition_vertically(spec.n_features, self.k_parties)?;
                ds.with_partition(partition)
            }
            DatasetSource::Csv {
                path,
                label_column,
                partition,
            } => {
                let spec = partition.clone().unwrap_or(PartitionSpec::Even {
                    parties: self.k_parties,
                });
                load_csv(path, label_column, &spec)
            }
        }
    }

    pub fn schedule(&self, dataset: &VerticalDataset) -> Result<TaskSchedule> {
        let plan = TrainingPlan {
            epochs: self.epochs,
            batch_size: self.batch_size,
        };
        match self.mode {
            TaskMode::Cil => make_cil_schedule(dataset.n_classes(), self.n_tasks, dataset.partition(), plan),
            TaskMode::Fil => make_fil_schedule(dataset.partition(), dataset.n_classes(), self.n_tasks, plan),
        }
    }
}

/// Everything a run produces, before anything is written to disk.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<TaskMetrics>,
    pub prototypes: Vec<PrototypeRecord>,
    pub fisher: Vec<FisherDump>,
    pub trace: Vec<RoundMessage>,
}

/// Runs the whole schedule in memory. On failure, returns the error along
/// with whatever metrics were completed.
pub fn run_in_memory(config: &ExperimentConfig) -> Result<RunOutput> {
    run_collecting(config).map_err(|(e, _)| e)
}

fn run_collecting(config: &ExperimentConfig) -> std::result::Result<RunOutput, (Error, Vec<TaskMetrics>)> {
    let fail = |e: Error| (e, Vec::new());
    config.validate().map_err(fail)?;
    let dataset = config.load_dataset().map_err(fail)?;
    let schedule = config.schedule(&dataset).map_err(fail)?;
    let split = DataSplit::stratified(
        dataset.label_view().all(),
        dataset.n_classes(),
        config.test_fraction,
        &mut stream_rng(config.seed, Stream::Split, 0),
    )
    .map_err(fail)?;
    let mut fed = Federation::new(&dataset, split, &schedule.tasks()[0], config.federation_config())
        .map_err(fail)?;
    let mut metrics = Vec::with_capacity(schedule.len());
    for task in schedule.tasks() {
        match fed.run_task(task) {
            Ok(m) => {
                log::info!(
                    "task {} done: current {:.4}, aggregate {:.4}, loss {:.4}",
                    m.task_id,
                    m.current_accuracy(),
                    m.aggregate.accuracy,
                    m.train_loss
                );
                metrics.push(m);
            }
            Err(e) => return Err((e, metrics)),
        }
    }
    Ok(RunOutput {
        metrics,
        prototypes: fed.prototype_exports().to_vec(),
        fisher: fed.fisher_dumps().to_vec(),
        trace: fed.trace().to_vec(),
    })
}

/// Which optional artifacts to write.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub export_prototypes: bool,
    pub dump_fisher: bool,
    pub dump_trace: bool,
}

/// Runs the experiment and writes `metrics.csv`, `config.json` and the
/// requested dumps into `config.output_dir`. A failed run leaves
/// `diagnostic.json` there instead of `metrics.csv`.
pub fn run_experiment(config: &ExperimentConfig, options: RunOptions) -> Result<RunOutput> {
    config.validate()?;
    let dir = &config.output_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), config.to_json()?)?;
    let out = match run_collecting(config) {
        Ok(out) => out,
        Err((e, partial)) => {
            let diag = serde_json::json!({
                "error": e.to_string(),
                "completed_tasks": partial,
            });
            fs::write(dir.join("diagnostic.json"), serde_json::to_string_pretty(&diag)?)?;
            return Err(e);
        }
    };
    let file = fs::File::create(dir.join("metrics.csv"))?;
    write_metrics_csv(file, &out.metrics, config.record_wall_time)?;
    if options.export_prototypes {
        fs::write(dir.join("prototypes.json"), serde_json::to_string_pretty(&out.prototypes)?)?;
    }
    if options.dump_fisher {
        for d in &out.fisher {
            let name = format!("fisher_{}_{}.json", d.party_id, d.task_id);
            fs::write(dir.join(name), serde_json::to_string(d)?)?;
        }
    }
    if options.dump_trace {
        fs::write(dir.join("trace.json"), serde_json::to_string(&out.trace)?)?;
    }
    Ok(out)
}

/// Runs independent configs (seed sweeps, ablation grids), concurrently
/// under [`Execution::Concurrent`]. Output order follows input order.
pub fn run_many(configs: &[ExperimentConfig], execution: Execution) -> Result<Vec<RunOutput>> {
    match execution {
        #[cfg(feature = "parallel")]
        Execution::Concurrent => {
            use rayon::prelude::*;
            configs.par_iter().map(run_in_memory).collect()
        }
        _ => configs.iter().map(run_in_memory).collect(),
    }
}
