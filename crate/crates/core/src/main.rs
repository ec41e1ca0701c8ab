use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use adaodm::adapt::{
    adapt_stream, make_stream, stream_checksum, write_batches_csv, AdaptConfig, AdaptSummary,
    Method,
};
use adaodm::bench::{
    build_run_data, export_features, run_ablation_grid, run_experiment, train_run,
    write_ablation_csv, write_outputs, Axis, ExperimentSpec,
};
use adaodm::checkpoint;
use adaodm::data::{read_csv, LabeledSet};
use adaodm::train::{write_records_csv, TrainConfig};
use adaodm::{Error, Result};

#[derive(Parser)]
#[command(
    name = "adaodm",
    version,
    about = "Disagreement-minimizing test-time adaptation on synthetic domain shift"
)]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "ADAODM_OUT_DIR", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a source model for the first seed of an experiment spec.
    Train {
        /// Experiment spec (TOML); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Adapt a saved checkpoint on a target domain.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV with x0..,label,domain columns; the target is `--domain`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        domain: usize,
        #[arg(long, default_value = "adaodm")]
        method: Method,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        lr_mult: f64,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        /// Training spec whose learning rate and momentum scale adaptation.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        stream_seed: u64,
    },
    /// Run every seed and method of an experiment spec.
    Experiment {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Sweep one ablation axis around a base spec.
    Ablate {
        #[arg(long)]
        axis: Axis,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Train on the first seed and dump eval-mode features of every domain.
    ExportFeatures {
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Write the default experiment spec as TOML.
    DefaultSpec,
}

#[derive(Serialize, Deserialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    message: String,
}

fn load_spec(path: Option<&Path>) -> Result<ExperimentSpec> {
    match path {
        Some(p) => ExperimentSpec::load(p),
        None => Ok(ExperimentSpec::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out;
    match cli.command {
        Command::Train { config } => {
            let spec = load_spec(config.as_deref())?;
            spec.validate()?;
            let seed = spec.seeds[0];
            let data = build_run_data(&spec, seed)?;
            let trained = train_run(&spec, &data, seed)?;
            create_dir(&out)?;
            checkpoint::save(
                &out.join("model.json"),
                &trained.model,
                Some(&data.standardizer),
            )?;
            write_records_csv(&out.join("train.csv"), &trained.records)?;
            println!(
                "best step {} with validation accuracy {:.4}; wrote {}",
                trained.best_step,
                trained.best_val_acc,
                out.display()
            );
        }
        Command::Adapt {
            checkpoint: ckpt,
            data,
            domain,
            method,
            steps,
            lr_mult,
            batch_size,
            config,
            stream_seed,
        } => {
            let (model, standardizer) = checkpoint::load(&ckpt)?;
            let train = match config {
                Some(p) => ExperimentSpec::load(&p)?.train,
                None => TrainConfig::default(),
            };
            let domains = read_csv(&data)?;
            let raw = domains.get(&domain).ok_or_else(|| {
                Error::Input(format!(
                    "{} has no rows for domain {domain}",
                    data.display()
                ))
            })?;
            let target: LabeledSet = match &standardizer {
                Some(st) => st.apply(raw),
                None => raw.clone(),
            };
            let cfg = AdaptConfig {
                method,
                steps_per_batch: steps,
                lr_multiplier: lr_mult,
                test_batch_size: batch_size,
                ..AdaptConfig::default()
            };
            let stream = make_stream(&target, batch_size, stream_seed);
            let checksum = stream_checksum(&stream);
            let outcome = adapt_stream(model, stream, &cfg, &train)?;
            create_dir(&out)?;
            write_batches_csv(&out.join("adapt_batches.csv"), &outcome.stats)?;
            write_json(
                &out.join("adapt_summary.json"),
                &AdaptSummary {
                    method,
                    config: cfg,
                    batches_seen: outcome.stats.batches_seen,
                    samples_seen: outcome.stats.samples_seen,
                    final_accuracy: outcome.stats.running_accuracy,
                    stream_checksum: checksum,
                },
            )?;
            checkpoint::save(
                &out.join("adapted.json"),
                &outcome.model,
                standardizer.as_ref(),
            )?;
            println!("{method}: accuracy {:.4}", outcome.stats.running_accuracy);
        }
        Command::Experiment { spec, workers } => {
            let mut spec = load_spec(spec.as_deref())?;
            if let Some(w) = workers {
                spec.workers = w;
            }
            let rows = run_experiment(&spec)?;
            write_outputs(&out, &rows)?;
            let failed = rows.iter().filter(|r| r.failed).count();
            println!(
                "{} rows ({failed} failed); wrote {}",
                rows.len(),
                out.display()
            );
        }
        Command::Ablate {
            axis,
            spec,
            workers,
        } => {
            let mut spec = load_spec(spec.as_deref())?;
            if let Some(w) = workers {
                spec.workers = w;
            }
            let rows = run_ablation_grid(&spec, axis)?;
            create_dir(&out)?;
            write_ablation_csv(&out.join(format!("ablation_{axis}.csv")), &rows)?;
            let plain: Vec<_> = rows.into_iter().map(|a| a.row).collect();
            write_outputs(&out.join(format!("ablation_{axis}")), &plain)?;
            println!("{} rows; wrote {}", plain.len(), out.display());
        }
        Command::ExportFeatures { spec } => {
            let spec = load_spec(spec.as_deref())?;
            spec.validate()?;
            let seed = spec.seeds[0];
            let data = build_run_data(&spec, seed)?;
            let trained = train_run(&spec, &data, seed)?;
            let mut sets: Vec<(usize, &LabeledSet)> = spec
                .source_domains()
                .into_iter()
                .zip(&data.sources)
                .map(|(d, s)| (d, &s.val))
                .collect();
            sets.push((spec.target_domain, &data.target));
            create_dir(&out)?;
            let path = out.join("features.csv");
            export_features(&trained.model, &sets, &path)?;
            println!("wrote {}", path.display());
        }
        Command::DefaultSpec => {
            let text = toml::to_string_pretty(&ExperimentSpec::default())
                .map_err(|e| Error::Config(e.to_string()))?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = ErrorRecord {
                error: e.kind(),
                message: e.to_string(),
            };
            eprintln!(
                "{}",
                serde_json::to_string(&record).expect("record serializes")
            );
            ExitCode::FAILURE
        }
    }
}
