//! Denoiser training against a preprocessed dataset, with per-step CSV
//! logging, checkpointing, and exact resume.

use std::path::{Path, PathBuf};

use anyhow::Context as _;
use clap::Args;
use inbetween_core::data::dataset::{ChunkDataset, ChunkId, Manifest};
use inbetween_core::data::MotionSequence;
use inbetween_core::denoiser::checkpoint::Checkpoint;
use inbetween_core::denoiser::{DenoiserConfig, DenoiserModel};
use inbetween_core::training::{TrainConfig, Trainer};
use inbetween_core::Real;
use serde::Serialize;

use crate::commands::preprocess::manifest_path;
use crate::config::{echo_effective, FileConfig};
use crate::usage;

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Preprocessed dataset file
    #[arg(long)]
    pub dataset: PathBuf,
    /// Run directory for checkpoints, logs, and the effective config
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub timesteps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "RATE")]
    pub lr: Option<Real>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub model_dim: Option<usize>,
    #[arg(long)]
    pub ff_dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub dropout: Option<Real>,
    /// Continue from an existing checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// TOML config file; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Effective {
    dataset: PathBuf,
    out: PathBuf,
    denoiser: DenoiserConfig,
    training: TrainConfig,
    resumed_from: Option<PathBuf>,
}

pub fn run(args: TrainArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let dataset = ChunkDataset::read(&args.dataset)
        .with_context(|| format!("reading dataset {}", args.dataset.display()))?;
    let manifest = Manifest::read(&manifest_path(&args.dataset))
        .with_context(|| "reading dataset manifest (run `inbetween preprocess` first)")?;

    let denoiser_config = DenoiserConfig {
        layers_per_stack: args.layers.or(file.denoiser.layers).unwrap_or(6),
        model_dim: args.model_dim.or(file.denoiser.model_dim).unwrap_or(512),
        ff_dim: args.ff_dim.or(file.denoiser.ff_dim).unwrap_or(2048),
        heads: args.heads.or(file.denoiser.heads).unwrap_or(8),
        dropout: args.dropout.or(file.denoiser.dropout).unwrap_or(0.1),
        block: dataset.block,
        feature_dim: dataset.feature_dim(),
        timesteps: args.timesteps.or(file.training.timesteps).unwrap_or(300),
        cache_context: file.denoiser.cache_context.unwrap_or(false),
    };
    let train_config = TrainConfig {
        batch_size: args.batch.or(file.training.batch).unwrap_or(128),
        timesteps: denoiser_config.timesteps,
        learning_rate: args.lr.or(file.training.learning_rate).unwrap_or(1e-4),
        beta1: file.training.beta1.unwrap_or(0.9),
        beta2: file.training.beta2.unwrap_or(0.999),
        epochs: args.epochs.or(file.training.epochs).unwrap_or(100),
        seed: args.seed.or(file.training.seed).unwrap_or(0),
        context_min: file.training.context_min.unwrap_or(1),
        context_max: file.training.context_max.unwrap_or(0),
        grad_clip: file.training.grad_clip.unwrap_or(1.0),
        beta_min: file.training.beta_min.unwrap_or(1e-4),
        beta_max: file.training.beta_max.unwrap_or(0.02),
        early_stop_patience: file.training.patience.unwrap_or(0),
        eval_seed: file.training.eval_seed.unwrap_or(0),
        loss_weights: Default::default(),
    };
    if train_config.batch_size == 0 {
        return Err(usage("--batch must be at least 1"));
    }

    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            Trainer::resume(ckpt, train_config.clone())?
        }
        None => {
            let model = DenoiserModel::new(denoiser_config.clone(), train_config.seed)?;
            Trainer::new(model, train_config.clone(), dataset.fps)?
        }
    };

    std::fs::create_dir_all(&args.out)?;
    let eff = Effective {
        dataset: args.dataset.clone(),
        out: args.out.clone(),
        denoiser: trainer.model().config().clone(),
        training: trainer.config.clone(),
        resumed_from: args.resume.clone(),
    };
    echo_effective(&args.out, "train", &eff)?;

    let (train_split, val_split) = gather_splits(&dataset, &manifest)?;
    println!(
        "training on {} chunks, validating on {} ({} parameters)",
        train_split.len(),
        val_split.len(),
        trainer.model().params().total_values()
    );

    let checkpoint_path = args.out.join("checkpoint.msdnz");
    let epochs = trainer.config.epochs;
    if epochs == 0 {
        // write the initial state and stop
        trainer.to_checkpoint()?.save(&checkpoint_path)?;
        println!("wrote initial checkpoint to {}", checkpoint_path.display());
        return Ok(());
    }

    let log_path = args.out.join("train.log.csv");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let history = trainer.run_epochs(&train_split, &val_split, epochs, &mut log)?;

    trainer.to_checkpoint()?.save(&checkpoint_path)?;
    if let Some(last) = history.last() {
        println!("final validation loss: {:.6}", last.total);
    }
    println!("checkpoint: {}", checkpoint_path.display());
    println!("training log: {}", log_path.display());
    Ok(())
}

type SplitRefs<'a> = Vec<(ChunkId, &'a MotionSequence)>;

fn gather_splits<'a>(dataset: &'a ChunkDataset, manifest: &Manifest) -> anyhow::Result<(SplitRefs<'a>, SplitRefs<'a>)> {
    let pick = |ids: &[ChunkId]| -> anyhow::Result<SplitRefs<'a>> {
        ids.iter()
            .map(|id| {
                dataset
                    .get(id)
                    .map(|r| (id.clone(), &r.sequence))
                    .ok_or_else(|| anyhow::anyhow!("manifest references missing chunk {id}"))
            })
            .collect()
    };
    Ok((pick(&manifest.split.train)?, pick(&manifest.split.val)?))
}

/// Shared by generate/evaluate: load a checkpoint into a model.
pub fn load_model(path: &Path) -> anyhow::Result<(DenoiserModel, Checkpoint)> {
    let ckpt = Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model = DenoiserModel::from_parts(ckpt.header.config.clone(), ckpt.params.clone())?;
    Ok((model, ckpt))
}
