//! Dataset construction from a directory of BVH clips: downsample to the
//! target rate, cut 75-frame chunks, add randomly yawed copies, split
//! 80/10/10, and write the binary dataset plus its manifest.

use std::path::{Path, PathBuf};

use anyhow::Context as _;
use clap::Args;
use inbetween_core::data::dataset::{ChunkDataset, ChunkId, Manifest};
use inbetween_core::data::pipeline::{augment_rotations, chunk, downsample, split_dataset};
use inbetween_core::data::{parse_bvh, MotionSequence, UpAxis};
use inbetween_core::training::derive_rng;
use inbetween_core::Real;
use serde::Serialize;

use crate::config::{echo_effective, run_dir_of, FileConfig};
use crate::usage;

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    /// Directory of .bvh source clips
    #[arg(long)]
    pub src: PathBuf,
    /// Output dataset file
    #[arg(long)]
    pub out: PathBuf,
    /// Target frame rate
    #[arg(long)]
    pub fps: Option<Real>,
    /// Frames per chunk
    #[arg(long)]
    pub block: Option<usize>,
    /// Random yawed copies per chunk
    #[arg(long)]
    pub augment: Option<usize>,
    /// Seed for augmentation and the train/val/test split
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// TOML config file; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Effective {
    src: PathBuf,
    out: PathBuf,
    fps: Real,
    block: usize,
    augment: usize,
    split_seed: u64,
    up_axis: UpAxis,
}

const STREAM_AUGMENT: u64 = 0x41;

pub fn run(args: PreprocessArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let eff = Effective {
        src: args.src.clone(),
        out: args.out.clone(),
        fps: args.fps.or(file.preprocess.fps).unwrap_or(15.0),
        block: args.block.or(file.preprocess.block).unwrap_or(75),
        augment: args.augment.or(file.preprocess.augment).unwrap_or(2),
        split_seed: args.split_seed.or(file.preprocess.split_seed).unwrap_or(0),
        up_axis: file.preprocess.up_axis.unwrap_or_default(),
    };
    if eff.fps <= 0.0 || eff.block == 0 {
        return Err(usage("--fps and --block must be positive"));
    }

    let mut sources: Vec<PathBuf> = std::fs::read_dir(&eff.src)
        .with_context(|| format!("reading source directory {}", eff.src.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("bvh")))
        .collect();
    sources.sort();
    if sources.is_empty() {
        anyhow::bail!("no .bvh files in {}", eff.src.display());
    }

    let mut dataset: Option<ChunkDataset> = None;
    let mut failures: Vec<(PathBuf, String)> = Vec::new();
    let mut parsed = 0usize;
    for (file_index, path) in sources.iter().enumerate() {
        match ingest(path, &eff, file_index, &mut dataset) {
            Ok(chunks) => {
                parsed += 1;
                println!(
                    "{}: {} chunks (x{} augmented copies)",
                    path.file_name().unwrap_or_default().to_string_lossy(),
                    chunks,
                    eff.augment
                );
            }
            Err(e) => failures.push((path.clone(), e.to_string())),
        }
    }
    for (path, reason) in &failures {
        eprintln!("failed: {}: {reason}", path.display());
    }
    if parsed == 0 {
        anyhow::bail!("all {} source files failed to parse", sources.len());
    }
    let dataset = dataset.expect("at least one file ingested");
    if dataset.chunks.is_empty() {
        anyhow::bail!("no chunks produced; sources shorter than {} frames at {} fps", eff.block, eff.fps);
    }

    let split = split_dataset(&dataset.ids(), eff.split_seed)?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    dataset.write(&args.out)?;
    let manifest = Manifest::from_split(&split, eff.block, dataset.fps);
    manifest.write(&manifest_path(&args.out))?;
    echo_effective(&run_dir_of(&args.out), "preprocess", &eff)?;

    println!(
        "dataset: {} chunks from {} clips ({} train / {} val / {} test) -> {}",
        dataset.chunks.len(),
        parsed,
        split.train.len(),
        split.val.len(),
        split.test.len(),
        args.out.display()
    );
    Ok(())
}

pub fn manifest_path(dataset: &Path) -> PathBuf {
    let mut name = dataset.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.toml");
    dataset.with_file_name(name)
}

/// Parse one clip and append its chunks (plus augmented copies).
/// Returns how many base chunks the clip contributed.
fn ingest(
    path: &Path,
    eff: &Effective,
    file_index: usize,
    dataset: &mut Option<ChunkDataset>,
) -> anyhow::Result<usize> {
    let text = std::fs::read_to_string(path)?;
    let (skeleton, raw) = parse_bvh(&text)?;
    let seq = MotionSequence::from_raw(skeleton.clone(), &raw)?;
    let slow = downsample(&seq, eff.fps)?;
    let chunks = chunk(&slow, eff.block)?;
    if chunks.is_empty() {
        anyhow::bail!(
            "{} frames at {} fps yield no {}-frame chunk",
            slow.frame_count(),
            slow.fps(),
            eff.block
        );
    }

    let ds = match dataset {
        Some(ds) => {
            if !skeletons_match(ds.skeleton.as_ref(), skeleton.as_ref()) {
                anyhow::bail!("skeleton differs from the first parsed clip");
            }
            ds
        }
        None => {
            *dataset = Some(ChunkDataset::new(skeleton.clone(), eff.block, slow.fps()));
            dataset.as_mut().unwrap()
        }
    };

    let source = path
        .file_stem()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned();
    let produced = chunks.len();
    for (chunk_index, base) in chunks.into_iter().enumerate() {
        ds.push(ChunkId::new(source.clone(), chunk_index, 0), base.clone())?;
        let mut rng = derive_rng(
            eff.split_seed,
            STREAM_AUGMENT,
            (file_index as u64) << 32 | chunk_index as u64,
        );
        let copies = augment_rotations(&base, eff.augment, eff.up_axis, &mut rng)?;
        for (v, copy) in copies.into_iter().enumerate() {
            ds.push(ChunkId::new(source.clone(), chunk_index, v as u32 + 1), copy)?;
        }
    }
    Ok(produced)
}

fn skeletons_match(a: &inbetween_core::kinematics::Skeleton, b: &inbetween_core::kinematics::Skeleton) -> bool {
    if a.joint_count() != b.joint_count() || a.parents() != b.parents() || a.names() != b.names() {
        return false;
    }
    a.rest_offsets()
        .iter()
        .zip(b.rest_offsets())
        .all(|(x, y)| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-6))
}
