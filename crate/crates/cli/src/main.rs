use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use vleto::data::{generate_synthetic, write_csv, SyntheticSpec};
use vleto::experiment::{run_experiment, ExperimentConfig, RunOptions};
use vleto::metrics::{avg_accuracy, compare_runs, read_metrics_file};

/// Vertical federated continual learning simulator.
#[derive(Parser)]
#[command(name = "vleto", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Write prototypes.json.
        #[arg(long)]
        export_prototypes: bool,
        /// Write fisher_<party>_<task>.json per party and task.
        #[arg(long)]
        dump_fisher: bool,
        /// Write trace.json with the recorded protocol messages.
        #[arg(long)]
        dump_trace: bool,
    },
    /// Write a synthetic Gaussian-blob dataset as CSV.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 16)]
        features: usize,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 4.0)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare per-task aggregate accuracy and AVG; the first file is the baseline.
    Compare {
        #[arg(required = true, num_args = 2..)]
        metrics: Vec<PathBuf>,
        /// Also write the comparison as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run_name(path: &Path) -> String {
    path.parent()
        .and_then(Path::file_name)
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            out_dir,
            export_prototypes,
            dump_fisher,
            dump_trace,
        } => {
            let mut cfg = ExperimentConfig::load(&config)
                .with_context(|| format!("loading config {}", config.display()))?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(dir) = out_dir {
                cfg.output_dir = dir;
            }
            let options = RunOptions {
                export_prototypes,
                dump_fisher,
                dump_trace,
            };
            let out = run_experiment(&cfg, options)?;
            for m in &out.metrics {
                println!(
                    "task {}: current {:.4}  all {:.4}",
                    m.task_id,
                    m.current_accuracy(),
                    m.aggregate.accuracy
                );
            }
            println!("AVG {:.4}", avg_accuracy(&out.metrics));
            println!("wrote {}", cfg.output_dir.join("metrics.csv").display());
        }
        Command::GenData {
            out,
            samples,
            features,
            classes,
            separation,
            seed,
        } => {
            let spec = SyntheticSpec {
                n_samples: samples,
                n_features: features,
                n_classes: classes,
                class_separation: separation,
            };
            let ds = generate_synthetic(&spec, seed)?;
            write_csv(&ds, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {samples} samples to {}", out.display());
        }
        Command::Compare { metrics, out } => {
            let runs = metrics
                .iter()
                .map(|p| {
                    let rows = read_metrics_file(p).with_context(|| format!("reading {}", p.display()))?;
                    Ok((run_name(p), rows))
                })
                .collect::<Result<Vec<_>>>()?;
            let cmp = compare_runs(&runs)?;
            print!("{}", cmp.to_text());
            if let Some(path) = out {
                cmp.write_csv(std::fs::File::create(&path)?)?;
            }
        }
    }
    Ok(())
}
