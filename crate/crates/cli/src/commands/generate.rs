//! Sequence generation from sparse context poses, exported as BVH (plus an
//! optional chunk-format copy and a metadata sidecar echoing the context).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context as _;
use clap::Args;
use inbetween_core::data::dataset::ChunkDataset;
use inbetween_core::data::{parse_bvh, serialize_bvh, Context, MotionSequence};
use inbetween_core::kinematics::Skeleton;
use inbetween_core::schedule::SamplerMode;
use inbetween_core::training::derive_rng;
use serde::Serialize;

use crate::commands::train::load_model;
use crate::config::{echo_effective, run_dir_of, FileConfig};
use crate::usage;

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Trained checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Context source: a .bvh clip or a chunk dataset file
    #[arg(long)]
    pub context: PathBuf,
    /// Output BVH path
    #[arg(long)]
    pub out: PathBuf,
    /// Explicit context frame indices, comma separated (e.g. 0,10,74)
    #[arg(long, value_delimiter = ',')]
    pub indices: Option<Vec<usize>>,
    /// Number of context poses to draw uniformly instead of --indices
    #[arg(long)]
    pub context_len: Option<usize>,
    /// Chunk to take context poses from when the source is a dataset
    #[arg(long)]
    pub chunk_id: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the raw chunk-format sequence here
    #[arg(long)]
    pub chunk_out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerModeArg>,
    /// TOML config file; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum SamplerModeArg {
    Direct,
    DdpmPosterior,
}

impl From<SamplerModeArg> for SamplerMode {
    fn from(v: SamplerModeArg) -> Self {
        match v {
            SamplerModeArg::Direct => SamplerMode::Direct,
            SamplerModeArg::DdpmPosterior => SamplerMode::DdpmPosterior,
        }
    }
}

#[derive(Debug, Serialize)]
struct Effective {
    checkpoint: PathBuf,
    context: PathBuf,
    out: PathBuf,
    indices: Vec<usize>,
    seed: u64,
    sampler: SamplerMode,
}

/// Context metadata echoed next to the generated clip.
#[derive(Debug, Serialize)]
struct OutputMeta {
    context_source: PathBuf,
    context_indices: Vec<usize>,
    seed: u64,
    checkpoint: PathBuf,
    frames: usize,
    fps: inbetween_core::Real,
}

pub fn run(args: GenerateArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let (model, ckpt) = load_model(&args.checkpoint)?;
    let sched = ckpt.schedule()?;
    let block = model.config().block;
    let seed = args.seed.or(file.generate.seed).unwrap_or(0);
    let sampler: SamplerMode = args
        .sampler
        .map(SamplerMode::from)
        .or(file.generate.sampler)
        .unwrap_or(ckpt.header.sampler_mode);

    let (skeleton, source_seq) = load_context_source(&args.context, args.chunk_id.as_deref())?;
    if source_seq.feature_dim() != model.config().feature_dim {
        anyhow::bail!(
            "context skeleton ({} joints) does not match the checkpoint ({} feature values)",
            skeleton.joint_count(),
            model.config().feature_dim
        );
    }

    let max_len = block / 2;
    let indices: Vec<usize> = match (&args.indices, args.context_len.or(file.generate.context_len)) {
        (Some(list), _) => {
            let mut v = list.clone();
            v.sort_unstable();
            v.dedup();
            v
        }
        (None, Some(l)) => {
            if l < 1 || l > max_len {
                return Err(usage(format!(
                    "--context-len {l} out of range: context length must be between 1 and {max_len} (half the block size {block})"
                )));
            }
            let mut rng = derive_rng(seed, 0x53, 0);
            let available = source_seq.frame_count().min(block);
            let mut picked = rand::seq::index::sample(&mut rng, available, l).into_vec();
            picked.sort_unstable();
            picked
        }
        (None, None) => {
            return Err(usage("provide --indices or --context-len"));
        }
    };
    if indices.is_empty() || indices.len() > max_len {
        return Err(usage(format!(
            "{} context poses out of range: context length must be between 1 and {max_len} (half the block size {block})",
            indices.len()
        )));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= block) {
        return Err(usage(format!("context index {bad} outside the {block}-frame block")));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= source_seq.frame_count()) {
        anyhow::bail!("context index {bad} outside the source clip ({} frames)", source_seq.frame_count());
    }

    let ctx = Context::from_sequence(&source_seq, &indices)?;
    let mut rng = derive_rng(seed, 0x47, 0);
    let generated = model.sample(&ctx, &sched, &skeleton, ckpt.header.fps, sampler, &mut rng)?;

    let text = serialize_bvh(&skeleton, &generated.to_raw()?)?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&args.out, text)
        .with_context(|| format!("writing {}", args.out.display()))?;

    let meta = OutputMeta {
        context_source: args.context.clone(),
        context_indices: indices.clone(),
        seed,
        checkpoint: args.checkpoint.clone(),
        frames: generated.frame_count(),
        fps: generated.fps(),
    };
    let meta_path = meta_path(&args.out);
    std::fs::write(&meta_path, toml::to_string_pretty(&meta)?)?;

    if let Some(chunk_out) = &args.chunk_out {
        let mut ds = ChunkDataset::new(skeleton.clone(), block, generated.fps());
        ds.push(
            inbetween_core::data::dataset::ChunkId::new("generated", 0, 0),
            generated.clone(),
        )?;
        ds.write(chunk_out)?;
    }

    echo_effective(
        &run_dir_of(&args.out),
        "generate",
        &Effective {
            checkpoint: args.checkpoint,
            context: args.context,
            out: args.out.clone(),
            indices,
            seed,
            sampler,
        },
    )?;
    println!(
        "generated {} frames at {} fps -> {} (context echoed in {})",
        generated.frame_count(),
        generated.fps(),
        args.out.display(),
        meta_path.display()
    );
    Ok(())
}

pub fn meta_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.toml");
    out.with_file_name(name)
}

/// A context source is either a BVH clip or a chunk dataset.
pub fn load_context_source(
    path: &Path,
    chunk_id: Option<&str>,
) -> anyhow::Result<(Arc<Skeleton>, MotionSequence)> {
    let is_bvh = path.extension().is_some_and(|x| x.eq_ignore_ascii_case("bvh"));
    if is_bvh {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let (skeleton, raw) = parse_bvh(&text)?;
        let seq = MotionSequence::from_raw(skeleton.clone(), &raw)?;
        Ok((skeleton, seq))
    } else {
        let ds = ChunkDataset::read(path)
            .with_context(|| format!("reading chunk dataset {}", path.display()))?;
        let record = match chunk_id {
            None => ds.chunks.first().ok_or_else(|| anyhow::anyhow!("dataset holds no chunks"))?,
            Some(id) => {
                let id: inbetween_core::data::dataset::ChunkId = id.parse()?;
                ds.get(&id).ok_or_else(|| anyhow::anyhow!("chunk {id} not in dataset"))?
            }
        };
        Ok((ds.skeleton.clone(), record.sequence.clone()))
    }
}
