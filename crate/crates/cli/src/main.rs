//! Command-line entry points: dataset generation, training, evaluation,
//! and inference. Exit code 0 on success; failures print a one-line
//! diagnostic and exit nonzero. ASTA3D_THREADS caps internal parallelism
//! (default 1, fully deterministic).

mod config;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use asta3d_core::geom::PointCloudSequence;
use asta3d_core::network::{argmax, ClassificationNetwork, NetworkSpec, SegmentationNetwork, Task};
use asta3d_core::seqfile::{read_dataset, read_sequence, write_sequence};
use asta3d_core::synth::{generate_blob_segmentation, generate_motion_classification, BlobSpec, MotionSpec};
use asta3d_core::tensor::checkpoint;
use asta3d_core::tensor::nn::ParamSet;
use asta3d_core::train::{
    eval_classification, eval_segmentation, split_validation, train_classification, train_segmentation,
};

use config::{RunConfig, Seeds, CONFIG_SCHEMA_VERSION};

#[derive(Parser)]
#[command(name = "asta3d", version, about = "Spatio-temporal anchor convolution networks for point cloud sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (train/ and test/ splits) to disk.
    Generate(GenerateArgs),
    /// Train a network from a config file; emits a checkpoint and report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Run inference on a single sequence file.
    Infer(InferArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Classification,
    Segmentation,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Classification => Task::Classification,
            TaskArg::Segmentation => Task::Segmentation,
        }
    }
}

#[derive(Parser)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Overwrite an existing dataset.
    #[arg(long)]
    force: bool,
    /// Frames per sequence (default 8 classification, 3 segmentation).
    #[arg(long)]
    frames: Option<u32>,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    // classification sizes
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    train_per_class: usize,
    #[arg(long, default_value_t = 10)]
    test_per_class: usize,
    #[arg(long, default_value_t = 64)]
    points_per_frame: usize,
    // segmentation sizes
    #[arg(long, default_value_t = 40)]
    sequences: usize,
    #[arg(long, default_value_t = 8)]
    test_sequences: usize,
    #[arg(long, default_value_t = 192)]
    background_points: usize,
    #[arg(long, default_value_t = 64)]
    blob_points: usize,
}

#[derive(Parser)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the checkpoint output path from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the weight-initialization seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Parser)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of .seq files to evaluate.
    #[arg(long)]
    data: PathBuf,
    /// Report output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Parser)]
struct InferArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input sequence file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Infer(args) => cmd_infer(args),
    }
}

// ---- generate ----------------------------------------------------------

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let train_dir = args.out.join("train");
    let test_dir = args.out.join("test");
    if (train_dir.exists() || test_dir.exists()) && !args.force {
        bail!(
            "dataset already exists at {} (use --force to overwrite)",
            args.out.display()
        );
    }
    std::fs::create_dir_all(&train_dir)?;
    std::fs::create_dir_all(&test_dir)?;

    let task: Task = args.task.into();
    let (train, test) = match task {
        Task::Classification => {
            let per_class = args.train_per_class + args.test_per_class;
            let spec = MotionSpec {
                classes: args.classes,
                sequences_per_class: per_class,
                frames: args.frames.unwrap_or(8),
                points_per_frame: args.points_per_frame,
                step: 0.12,
                noise_sigma: args.noise,
                seed: args.seed,
            };
            let seqs = generate_motion_classification(&spec)?;
            // class-major order: the first train_per_class of each class train
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (i, seq) in seqs.into_iter().enumerate() {
                if i % per_class < args.train_per_class {
                    train.push(seq);
                } else {
                    test.push(seq);
                }
            }
            (train, test)
        }
        Task::Segmentation => {
            if args.test_sequences >= args.sequences {
                bail!("test sequence count must be below the total");
            }
            let spec = BlobSpec {
                sequences: args.sequences,
                frames: args.frames.unwrap_or(3),
                background_points: args.background_points,
                blob_points: args.blob_points,
                noise_sigma: args.noise,
                seed: args.seed,
                blob_start: None,
                blob_velocity: None,
            };
            let mut seqs = generate_blob_segmentation(&spec)?;
            let test = seqs.split_off(args.sequences - args.test_sequences);
            (seqs, test)
        }
    };

    for (dir, seqs) in [(&train_dir, &train), (&test_dir, &test)] {
        for old in std::fs::read_dir(dir)?.filter_map(|e| e.ok()) {
            if old.path().extension().is_some_and(|e| e == "seq") {
                std::fs::remove_file(old.path())?;
            }
        }
        for (i, seq) in seqs.iter().enumerate() {
            write_sequence(seq, task, &dir.join(format!("{i:05}.seq")))?;
        }
    }
    println!(
        "wrote {} train and {} test sequences to {}",
        train.len(),
        test.len(),
        args.out.display()
    );
    Ok(())
}

// ---- train -------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MetricsReport {
    schema_version: u32,
    task: Task,
    seeds: Seeds,
    config: RunConfig,
    epoch_losses: Vec<f64>,
    epochs_run: usize,
    steps: u64,
    best_epoch: usize,
    final_metrics: FinalMetrics,
    wall_clock_seconds: f64,
    checkpoint_sha256: String,
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum FinalMetrics {
    Classification {
        train_accuracy: f64,
        val_accuracy: f64,
    },
    Segmentation {
        train_miou: f64,
        val_miou: f64,
        val_per_class: Vec<Option<f64>>,
    },
}

fn load_splits(config: &RunConfig) -> Result<(Vec<PointCloudSequence>, Vec<PointCloudSequence>)> {
    let root = &config.paths.dataset;
    let train_dir = root.join("train");
    let (train, val) = if train_dir.is_dir() {
        let train = load_labeled(&train_dir, config.task)?;
        let test_dir = root.join("test");
        if test_dir.is_dir() {
            (train, load_labeled(&test_dir, config.task)?)
        } else {
            split_validation(train, config.training.val_fraction, config.training.seeds.data)
        }
    } else {
        let all = load_labeled(root, config.task)?;
        split_validation(all, config.training.val_fraction, config.training.seeds.data)
    };
    Ok((train, val))
}

fn load_labeled(dir: &Path, expected_task: Task) -> Result<Vec<PointCloudSequence>> {
    let entries = read_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    let mut out = Vec::with_capacity(entries.len());
    for (seq, task) in entries {
        if task != expected_task {
            bail!(
                "dataset {} holds {:?} sequences, config expects {:?}",
                dir.display(),
                task,
                expected_task
            );
        }
        out.push(seq);
    }
    Ok(out)
}

/// Dimension and label checks before any training step runs.
fn preflight(config: &RunConfig, seqs: &[PointCloudSequence]) -> Result<()> {
    let spec = &config.network;
    for (i, seq) in seqs.iter().enumerate() {
        let Some(labels) = seq.labels() else {
            bail!("sequence {} has no labels", i);
        };
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= spec.class_count) {
            bail!("sequence {} holds label {} outside {} classes", i, bad, spec.class_count);
        }
        if seq.len() < spec.stages[0].core_count {
            bail!(
                "sequence {} has {} points, below the first core count {}",
                i,
                seq.len(),
                spec.stages[0].core_count
            );
        }
        if config.task == Task::Segmentation && seq.feature_dim() != 3 {
            bail!(
                "sequence {} stores {} feature channels, segmentation needs RGB (3)",
                i,
                seq.feature_dim()
            );
        }
    }
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let start = Instant::now();
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.training.seeds.init = seed;
    }
    if let Some(out) = &args.out {
        config.paths.checkpoint_out = out.clone();
    }

    let (train, val) = load_splits(&config)?;
    preflight(&config, &train)?;
    preflight(&config, &val)?;

    let opts = config.train_options();
    let (params, history, final_metrics) = match config.task {
        Task::Classification => {
            let run = train_classification(&config.network, &train, &val, &opts)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            (
                run.params,
                run.history,
                FinalMetrics::Classification {
                    train_accuracy: run.train_accuracy,
                    val_accuracy: run.val_accuracy,
                },
            )
        }
        Task::Segmentation => {
            let run = train_segmentation(&config.network, &train, &val, &opts)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            (
                run.params,
                run.history,
                FinalMetrics::Segmentation {
                    train_miou: run.train_iou.mean_iou,
                    val_miou: run.val_iou.mean_iou,
                    val_per_class: run.val_iou.per_class.clone(),
                },
            )
        }
    };

    if let Some(parent) = config.paths.checkpoint_out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    checkpoint::save(&params, &config.paths.checkpoint_out).map_err(|e| anyhow::anyhow!("{e}"))?;
    let checkpoint_sha256 = sha256_file(&config.paths.checkpoint_out)?;

    let report = MetricsReport {
        schema_version: CONFIG_SCHEMA_VERSION,
        task: config.task,
        seeds: config.training.seeds.clone(),
        config: config.clone(),
        epoch_losses: history.epoch_losses.clone(),
        epochs_run: history.epochs_run,
        steps: history.steps,
        best_epoch: history.best_epoch,
        final_metrics,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        checkpoint_sha256,
    };
    if let Some(parent) = config.paths.report_out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&config.paths.report_out, serde_json::to_string_pretty(&report)?)?;
    println!(
        "trained {} epochs ({} steps); checkpoint {} report {}",
        report.epochs_run,
        report.steps,
        config.paths.checkpoint_out.display(),
        config.paths.report_out.display()
    );
    Ok(())
}

// ---- eval --------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct EvalReport {
    schema_version: u32,
    task: Task,
    dataset: PathBuf,
    checkpoint_sha256: String,
    metrics: EvalMetrics,
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum EvalMetrics {
    Classification { accuracy: f64 },
    Segmentation { miou: f64, per_class: Vec<Option<f64>> },
}

fn build_and_load(
    spec: &NetworkSpec,
    init_seed: u64,
    ckpt: &Path,
) -> Result<(Option<ClassificationNetwork>, Option<SegmentationNetwork>, ParamSet)> {
    let mut params = ParamSet::new();
    let (cls, seg) = match spec.task {
        Task::Classification => (
            Some(
                ClassificationNetwork::init(spec.clone(), &mut params, init_seed)
                    .map_err(|e| anyhow::anyhow!("{e}"))?,
            ),
            None,
        ),
        Task::Segmentation => (
            None,
            Some(
                SegmentationNetwork::init(spec.clone(), &mut params, init_seed)
                    .map_err(|e| anyhow::anyhow!("{e}"))?,
            ),
        ),
    };
    checkpoint::load_into(&mut params, ckpt).map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok((cls, seg, params))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let config = RunConfig::load(&args.config)?;
    let seqs = load_labeled(&args.data, config.task)?;
    let (cls, seg, mut params) =
        build_and_load(&config.network, config.training.seeds.init, &args.checkpoint)?;
    let metrics = match config.task {
        Task::Classification => {
            let (acc, _) = eval_classification(cls.as_ref().unwrap(), &mut params, &seqs)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            EvalMetrics::Classification { accuracy: acc }
        }
        Task::Segmentation => {
            let (report, _) = eval_segmentation(seg.as_ref().unwrap(), &mut params, &seqs)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            EvalMetrics::Segmentation {
                miou: report.mean_iou,
                per_class: report.per_class,
            }
        }
    };
    let report = EvalReport {
        schema_version: CONFIG_SCHEMA_VERSION,
        task: config.task,
        dataset: args.data.clone(),
        checkpoint_sha256: sha256_file(&args.checkpoint)?,
        metrics,
    };
    let text = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

// ---- infer -------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct InferReport {
    schema_version: u32,
    task: Task,
    #[serde(skip_serializing_if = "Option::is_none")]
    class: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    logits: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    classes: Option<Vec<u32>>,
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let config = RunConfig::load(&args.config)?;
    let (seq, file_task) = read_sequence(&args.input).map_err(|e| anyhow::anyhow!("{e}"))?;
    if file_task != config.task {
        bail!(
            "input file is a {:?} sequence, config expects {:?}",
            file_task,
            config.task
        );
    }
    let (cls, seg, mut params) =
        build_and_load(&config.network, config.training.seeds.init, &args.checkpoint)?;
    let report = match config.task {
        Task::Classification => {
            let logits = cls
                .as_ref()
                .unwrap()
                .classify(&mut params, &seq)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            InferReport {
                schema_version: CONFIG_SCHEMA_VERSION,
                task: config.task,
                class: Some(argmax(&logits) as u32),
                logits: Some(logits),
                classes: None,
            }
        }
        Task::Segmentation => {
            let logits = seg
                .as_ref()
                .unwrap()
                .segment(&mut params, &seq)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            let classes: Vec<u32> = logits
                .chunks(config.network.class_count)
                .map(|row| argmax(row) as u32)
                .collect();
            InferReport {
                schema_version: CONFIG_SCHEMA_VERSION,
                task: config.task,
                class: None,
                logits: None,
                classes: Some(classes),
            }
        }
    };
    std::fs::write(&args.out, serde_json::to_string_pretty(&report)?)?;
    Ok(())
}
