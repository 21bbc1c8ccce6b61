//! Command-line front end: synthetic data generation, dataset stylization,
//! training, evaluation, and the experiment arms.
//!
//! Every subcommand takes an optional `--config <file>` (JSON mirroring the
//! corresponding config structs, any subset of fields), with explicit flags
//! overriding the file. Exit codes: 0 success, 1 validation error, 2
//! training divergence, 3 zero-shot contract violation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use icehrnet::dataset::{DatasetManifest, Split};
use icehrnet::error::{Error, Result};
use icehrnet::experiments::{
    gen_synthetic_domains, run_experiment, run_matrix, BackendSpec, ExperimentMode,
    ExperimentSpec, SyntheticDomainParams,
};
use icehrnet::model::{load_checkpoint, Model, SegConfig};
use icehrnet::styletransfer::{stylize_dataset, StyleBank, StylizeMode, TransferBackend};
use icehrnet::training::{evaluate, train, ResumePoint, TrainConfig};

#[derive(Parser)]
#[command(
    name = "icehrnet",
    version,
    about = "Texture-sensitive segmentation with per-class style transfer"
)]
struct Cli {
    /// Master seed; overrides any seed found in --config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config file for the subcommand (any subset of fields).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic source/target domains and their style bank.
    Synth,
    /// Restyle a dataset with a style bank.
    Stylize {
        /// none, conventional or advanced.
        #[arg(long)]
        mode: String,
        /// Style bank JSON (required for conventional/advanced).
        #[arg(long)]
        bank: Option<PathBuf>,
        /// statistical or neural.
        #[arg(long, default_value = "statistical")]
        backend: String,
        /// Blend weight for the neural backend.
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        /// Input dataset manifest.
        #[arg(long = "in", value_name = "MANIFEST")]
        input: PathBuf,
    },
    /// Train on a manifest's train/val splits.
    Train {
        /// Dataset manifest with train/val split assignments.
        #[arg(long, value_name = "MANIFEST")]
        data: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "MANIFEST")]
        data: PathBuf,
        /// train, val, test or all.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run one experiment arm against the target test split.
    Experiment {
        /// supervised, none, conventional or advanced.
        #[arg(long)]
        mode: String,
        #[arg(long, value_name = "MANIFEST")]
        source: Option<PathBuf>,
        #[arg(long, value_name = "MANIFEST")]
        target: PathBuf,
        #[arg(long, value_name = "FILE")]
        bank: Option<PathBuf>,
        /// statistical or neural (overrides --config).
        #[arg(long)]
        backend: Option<String>,
        /// Neural blend weight (overrides --config).
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Run all four arms and print the comparison table.
    Matrix {
        #[arg(long, value_name = "MANIFEST")]
        source: PathBuf,
        #[arg(long, value_name = "MANIFEST")]
        target: PathBuf,
        #[arg(long, value_name = "FILE")]
        bank: PathBuf,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
    },
}

/// Train/eval configuration file body.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainCliConfig {
    seg_config: SegConfig,
    train_config: TrainConfig,
}

/// Experiment/matrix configuration file body.
#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExperimentCliConfig {
    seg_config: SegConfig,
    train_config: TrainConfig,
    backend: BackendSpec,
    neural_alpha: f64,
    seed: u64,
}

impl Default for ExperimentCliConfig {
    fn default() -> Self {
        ExperimentCliConfig {
            seg_config: SegConfig::default(),
            train_config: TrainConfig::default(),
            backend: BackendSpec::Statistical,
            neural_alpha: 1.0,
            seed: 0,
        }
    }
}

fn load_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))
        }
    }
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref()
        .ok_or_else(|| Error::validation("--out <dir> is required for this command"))
}

fn parse_backend(name: &str, seed: u64, alpha: f64) -> Result<TransferBackend> {
    match BackendSpec::from_str(name)? {
        BackendSpec::Statistical => Ok(TransferBackend::statistical()),
        BackendSpec::Neural => TransferBackend::neural_seeded(seed, alpha),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth => {
            let out = require_out(&cli.out)?;
            let mut params: SyntheticDomainParams = load_config(cli.config.as_deref())?;
            if let Some(seed) = cli.seed {
                params.seed = seed;
            }
            let domains = gen_synthetic_domains(&params, out)?;
            println!("source manifest: {}", domains.source_manifest_path.display());
            println!("target manifest: {}", domains.target_manifest_path.display());
            println!("style bank:      {}", domains.bank_path.display());
            println!(
                "samples per domain: {} ({} train / {} val / {} test)",
                params.train_count + params.val_count + params.test_count,
                params.train_count,
                params.val_count,
                params.test_count
            );
            Ok(())
        }
        Command::Stylize {
            mode,
            bank,
            backend,
            alpha,
            input,
        } => {
            let out = require_out(&cli.out)?;
            let seed = cli.seed.unwrap_or(0);
            let mode = StylizeMode::from_str(&mode)?;
            let manifest = DatasetManifest::load(&input)?;
            let bank = bank.as_deref().map(StyleBank::load).transpose()?;
            let backend = parse_backend(&backend, seed, alpha)?;
            let stylized = stylize_dataset(&manifest, bank.as_ref(), mode, &backend, seed, out)?;
            println!(
                "stylized manifest: {}",
                out.join("manifest.json").display()
            );
            println!("samples: {}", stylized.samples.len());
            Ok(())
        }
        Command::Train { data, resume } => {
            let out = require_out(&cli.out)?;
            let config: TrainCliConfig = load_config(cli.config.as_deref())?;
            let mut train_config = config.train_config;
            if let Some(seed) = cli.seed {
                train_config.seed = seed;
            }
            let manifest = DatasetManifest::load_header(&data)?;
            let train_set = manifest.load_split(Some(Split::Train))?;
            let val_set = manifest.load_split(Some(Split::Val))?;
            let (mut model, resume_point) = match &resume {
                None => (
                    Model::<f32>::build(config.seg_config, train_config.seed)?,
                    ResumePoint::fresh(),
                ),
                Some(path) => {
                    let (model, meta, sections) = load_checkpoint::<f32>(path)?;
                    let resume_point = ResumePoint::from_checkpoint(&sections, meta.iteration)?;
                    (model, resume_point)
                }
            };
            let outcome = train(
                &mut model,
                &train_set,
                &val_set,
                &train_config,
                resume_point,
                Some(out),
            )?;
            println!(
                "best val mIoU {:.4} at iteration {}",
                outcome.best_val_miou, outcome.best_iteration
            );
            if let Some(path) = &outcome.best_checkpoint {
                println!("best checkpoint: {}", path.display());
            }
            if let Some(path) = &outcome.last_checkpoint {
                println!("last checkpoint: {}", path.display());
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            split,
        } => {
            let (model, meta, _) = load_checkpoint::<f32>(&checkpoint)?;
            let manifest = DatasetManifest::load_header(&data)?;
            let split = match split.as_str() {
                "train" => Some(Split::Train),
                "val" => Some(Split::Val),
                "test" => Some(Split::Test),
                "all" => None,
                other => {
                    return Err(Error::validation(format!(
                        "unknown split {other:?}; expected train, val, test or all"
                    )))
                }
            };
            let samples = manifest.load_split(split)?;
            let report = evaluate(&model, &samples)?;
            let text = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::json(&checkpoint, e))?;
            println!("{text}");
            eprintln!(
                "checkpoint at iteration {}: Acc {:.4}, mIoU {:.4}",
                meta.iteration, report.accuracy, report.miou
            );
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                let path = out.join("eval.json");
                std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        }
        Command::Experiment {
            mode,
            source,
            target,
            bank,
            backend,
            alpha,
        } => {
            let out = require_out(&cli.out)?;
            let config: ExperimentCliConfig = load_config(cli.config.as_deref())?;
            let spec = ExperimentSpec {
                mode: ExperimentMode::from_str(&mode)?,
                source_manifest: source,
                target_manifest: target,
                style_bank: bank,
                seg_config: config.seg_config,
                train_config: config.train_config,
                backend: match backend {
                    Some(name) => BackendSpec::from_str(&name)?,
                    None => config.backend,
                },
                neural_alpha: alpha.unwrap_or(config.neural_alpha),
                seed: cli.seed.unwrap_or(config.seed),
                out_dir: out.to_path_buf(),
            };
            let report = run_experiment(&spec)?;
            println!(
                "{}: Acc {:.4}, mIoU {:.4}",
                report.mode.label(),
                report.metrics.accuracy,
                report.metrics.miou
            );
            println!("report: {}", out.join("report.json").display());
            Ok(())
        }
        Command::Matrix {
            source,
            target,
            bank,
            backend,
            alpha,
        } => {
            let out = require_out(&cli.out)?;
            let config: ExperimentCliConfig = load_config(cli.config.as_deref())?;
            let backend = match backend {
                Some(name) => BackendSpec::from_str(&name)?,
                None => config.backend,
            };
            let seed = cli.seed.unwrap_or(config.seed);
            let specs: Vec<ExperimentSpec> = ExperimentMode::ALL
                .iter()
                .map(|&mode| ExperimentSpec {
                    mode,
                    source_manifest: Some(source.clone()),
                    target_manifest: target.clone(),
                    style_bank: Some(bank.clone()),
                    seg_config: config.seg_config.clone(),
                    train_config: config.train_config.clone(),
                    backend,
                    neural_alpha: alpha.unwrap_or(config.neural_alpha),
                    seed,
                    out_dir: out.join(format!("arm-{mode}")),
                })
                .collect();
            let matrix = run_matrix(&specs)?;
            let table = matrix.render();
            print!("{table}");
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            matrix.save(&out.join("matrix.json"))?;
            let table_path = out.join("matrix.txt");
            std::fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
            println!("matrix report: {}", out.join("matrix.json").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    // Die quietly on SIGPIPE like other line-oriented tools instead of
    // panicking when stdout is closed early (e.g. piped into `head`).
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
