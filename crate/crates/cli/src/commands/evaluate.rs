//! Quantitative evaluation: FID / Diversity / Multimodality with bootstrap
//! spreads, plus the feature-extractor training subcommand.

use std::path::PathBuf;

use anyhow::Context as _;
use clap::Args;
use inbetween_core::data::dataset::{ChunkDataset, Manifest};
use inbetween_core::data::{sample_context, MotionSequence};
use inbetween_core::evaluation::{
    bootstrap_metric, diversity, fid, format_report, multimodality, ExtractorConfig,
    FeatureExtractor, GaussianStats, MetricValue, ReportRow, EMBED_DIM,
};
use inbetween_core::schedule::SamplerMode;
use inbetween_core::tensor::Tensor;
use inbetween_core::training::derive_rng;
use inbetween_core::Real;
use serde::Serialize;

use crate::commands::preprocess::manifest_path;
use crate::commands::train::load_model;
use crate::config::{echo_effective, run_dir_of, FileConfig};
use crate::usage;

#[derive(Args, Debug)]
pub struct TrainExtractorArgs {
    /// Preprocessed dataset file
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output artifact path
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: Real,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run_train_extractor(args: TrainExtractorArgs) -> anyhow::Result<()> {
    let dataset = ChunkDataset::read(&args.dataset)?;
    let manifest = Manifest::read(&manifest_path(&args.dataset))
        .context("reading dataset manifest (run `inbetween preprocess` first)")?;
    let train: Vec<&MotionSequence> = manifest
        .split
        .train
        .iter()
        .filter_map(|id| dataset.get(id).map(|r| &r.sequence))
        .collect();
    if train.is_empty() {
        anyhow::bail!("dataset has no training chunks");
    }
    let config = ExtractorConfig::for_block(dataset.block, dataset.feature_dim())?;
    let mut extractor = FeatureExtractor::new(config, args.seed)?;
    let mse = extractor.train(&train, args.epochs, args.lr)?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    extractor.save(&args.out)?;
    println!(
        "extractor trained on {} chunks, final reconstruction MSE {:.6} -> {}",
        train.len(),
        mse,
        args.out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Trained checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Preprocessed dataset file
    #[arg(long)]
    pub dataset: PathBuf,
    /// Which split to evaluate against
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Frozen feature-extractor artifact
    #[arg(long)]
    pub extractor: PathBuf,
    /// Report output path
    #[arg(long)]
    pub out: PathBuf,
    /// Context lengths to evaluate, comma separated
    #[arg(long, value_delimiter = ',')]
    pub context_lens: Option<Vec<usize>>,
    /// Generated samples per condition (multimodality groups)
    #[arg(long)]
    pub reps: Option<usize>,
    /// Number of conditions (context draws) per context length
    #[arg(long)]
    pub conditions: Option<usize>,
    /// Random pairs for the diversity estimate
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Bootstrap repeats behind every +- spread
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML config file; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Effective {
    checkpoint: PathBuf,
    dataset: PathBuf,
    split: String,
    extractor: PathBuf,
    out: PathBuf,
    context_lens: Vec<usize>,
    reps_per_condition: usize,
    conditions: usize,
    pair_count: usize,
    bootstrap_repeats: usize,
    seed: u64,
}

pub fn run(args: EvaluateArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    if !args.extractor.exists() {
        anyhow::bail!(
            "feature extractor {} not found; train one with `inbetween train-extractor --dataset {} --out {}`",
            args.extractor.display(),
            args.dataset.display(),
            args.extractor.display()
        );
    }
    let eff = Effective {
        checkpoint: args.checkpoint.clone(),
        dataset: args.dataset.clone(),
        split: args.split.clone(),
        extractor: args.extractor.clone(),
        out: args.out.clone(),
        context_lens: args
            .context_lens
            .clone()
            .or(file.evaluate.context_lens)
            .unwrap_or_else(|| vec![20, 10]),
        reps_per_condition: args.reps.or(file.evaluate.reps_per_condition).unwrap_or(10),
        conditions: args.conditions.or(file.evaluate.conditions).unwrap_or(8),
        pair_count: args.pairs.or(file.evaluate.pair_count).unwrap_or(300),
        bootstrap_repeats: args.bootstrap.or(file.evaluate.bootstrap_repeats).unwrap_or(10),
        seed: args.seed.or(file.evaluate.seed).unwrap_or(0),
    };
    if eff.reps_per_condition < 2 {
        return Err(usage("--reps must be at least 2 for multimodality groups"));
    }
    if eff.bootstrap_repeats < 2 {
        return Err(usage("--bootstrap must be at least 2"));
    }

    let (model, ckpt) = load_model(&args.checkpoint)?;
    let sched = ckpt.schedule()?;
    let extractor = FeatureExtractor::load(&args.extractor)?;
    let dataset = ChunkDataset::read(&args.dataset)?;
    let manifest = Manifest::read(&manifest_path(&args.dataset))?;
    let ids = match eff.split.as_str() {
        "train" => &manifest.split.train,
        "val" => &manifest.split.val,
        "test" => &manifest.split.test,
        other => return Err(usage(format!("unknown split {other:?} (train|val|test)"))),
    };
    let chunks: Vec<&MotionSequence> = ids
        .iter()
        .filter_map(|id| dataset.get(id).map(|r| &r.sequence))
        .collect();
    if chunks.len() < 4 {
        anyhow::bail!("split {} holds {} chunks; need at least 4", eff.split, chunks.len());
    }

    let report = evaluate_model(&model, &sched, &extractor, &chunks, &eff)?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&args.out, &report)?;
    echo_effective(&run_dir_of(&args.out), "evaluate", &eff)?;
    print!("{report}");
    println!("report written to {}", args.out.display());
    Ok(())
}

fn evaluate_model(
    model: &inbetween_core::denoiser::DenoiserModel,
    sched: &inbetween_core::schedule::DiffusionSchedule,
    extractor: &FeatureExtractor,
    chunks: &[&MotionSequence],
    eff: &Effective,
) -> anyhow::Result<String> {
    let real_features = extractor.extract_features(chunks)?;
    let real_stats = GaussianStats::from_features(&real_features)?;
    let mut notes = Vec::new();
    if real_stats.is_shrunk() {
        notes.push(format!(
            "real covariance uses the diagonal-plus-shrinkage estimate ({} samples for {} dims)",
            chunks.len(),
            EMBED_DIM
        ));
    }

    let mut rows = Vec::new();
    rows.push(real_row(&real_features, eff)?);

    let skeleton = chunks[0].skeleton().clone();
    let fps = chunks[0].fps();
    let block = model.config().block;
    for &l in &eff.context_lens {
        if l < 1 || l > block / 2 {
            anyhow::bail!(
                "context length {l} out of range: must be between 1 and {} (half the block size {block})",
                block / 2
            );
        }
        // generate reps samples for each of `conditions` contexts
        let mut groups: Vec<Tensor> = Vec::new();
        let mut pooled = Vec::new();
        let mut pooled_rows = 0usize;
        for c in 0..eff.conditions.min(chunks.len()) {
            let source = chunks[c % chunks.len()];
            let mut ctx_rng = derive_rng(eff.seed, 0xC0, (l as u64) << 32 | c as u64);
            let ctx = sample_context(source, l, &mut ctx_rng)?;
            let mut group_rows = Vec::new();
            for rep in 0..eff.reps_per_condition {
                let mut gen_rng =
                    derive_rng(eff.seed, 0x6E, (l as u64) << 40 | (c as u64) << 20 | rep as u64);
                let seq = model.sample(&ctx, sched, &skeleton, fps, SamplerMode::Direct, &mut gen_rng)?;
                let f = extractor.extract(&seq)?;
                group_rows.extend_from_slice(&f);
                pooled.extend_from_slice(&f);
                pooled_rows += 1;
            }
            groups.push(Tensor::new(vec![eff.reps_per_condition, EMBED_DIM], group_rows)?);
        }
        let generated = Tensor::new(vec![pooled_rows, EMBED_DIM], pooled)?;
        rows.push(model_row(l, &real_stats, &generated, &groups, eff, &mut notes)?);
    }

    Ok(format_report(&rows, &notes))
}

/// Real-data row: FID between split halves (self-distance up to sampling
/// noise) and the diversity of the real features.
fn real_row(real_features: &Tensor, eff: &Effective) -> anyhow::Result<ReportRow> {
    let n = real_features.rows();
    let d = real_features.cols();
    let half = n / 2;
    let a = Tensor::new(vec![half, d], real_features.data()[..half * d].to_vec())?;
    let b = Tensor::new(vec![n - half, d], real_features.data()[half * d..].to_vec())?;
    let stats_a = GaussianStats::from_features(&a)?;

    let counter = std::cell::Cell::new(0u64);
    let fid_metric = |f: &Tensor| -> inbetween_core::Result<Real> {
        let stats = GaussianStats::from_features(f)?;
        fid(&stats_a, &stats)
    };
    let mut rng = derive_rng(eff.seed, 0xF1, 0);
    let (fid_mean, fid_std) = bootstrap_metric(&fid_metric, &b, eff.bootstrap_repeats, &mut rng)?;

    let div_metric = |f: &Tensor| -> inbetween_core::Result<Real> {
        let i = counter.get();
        counter.set(i + 1);
        let mut r = derive_rng(eff.seed, 0xD1, i);
        diversity(f, eff.pair_count, &mut r)
    };
    let mut rng = derive_rng(eff.seed, 0xD2, 0);
    let (div_mean, div_std) =
        bootstrap_metric(&div_metric, real_features, eff.bootstrap_repeats, &mut rng)?;

    Ok(ReportRow {
        dataset: "dataset".into(),
        method: "Real".into(),
        fid: MetricValue { mean: fid_mean, std: fid_std },
        diversity: MetricValue { mean: div_mean, std: div_std },
        multimodality: None,
    })
}

fn model_row(
    l: usize,
    real_stats: &GaussianStats,
    generated: &Tensor,
    groups: &[Tensor],
    eff: &Effective,
    notes: &mut Vec<String>,
) -> anyhow::Result<ReportRow> {
    let gen_stats = GaussianStats::from_features(generated)?;
    if gen_stats.is_shrunk() && notes.iter().all(|n| !n.contains("generated")) {
        notes.push(format!(
            "generated covariance uses the diagonal-plus-shrinkage estimate ({} samples for {} dims)",
            generated.rows(),
            EMBED_DIM
        ));
    }
    let fid_metric = |f: &Tensor| -> inbetween_core::Result<Real> {
        let stats = GaussianStats::from_features(f)?;
        fid(real_stats, &stats)
    };
    let mut rng = derive_rng(eff.seed, 0xF2, l as u64);
    let (fid_mean, fid_std) = bootstrap_metric(&fid_metric, generated, eff.bootstrap_repeats, &mut rng)?;

    let counter = std::cell::Cell::new(0u64);
    let div_metric = |f: &Tensor| -> inbetween_core::Result<Real> {
        let i = counter.get();
        counter.set(i + 1);
        let mut r = derive_rng(eff.seed, 0xD3, (l as u64) << 32 | i);
        diversity(f, eff.pair_count, &mut r)
    };
    let mut rng = derive_rng(eff.seed, 0xD4, l as u64);
    let (div_mean, div_std) = bootstrap_metric(&div_metric, generated, eff.bootstrap_repeats, &mut rng)?;

    let (mm_mean, mm_std) = bootstrap_groups(groups, eff.bootstrap_repeats, eff.seed, l as u64)?;

    Ok(ReportRow {
        dataset: "dataset".into(),
        method: format!("Model |c|={l}"),
        fid: MetricValue { mean: fid_mean, std: fid_std },
        diversity: MetricValue { mean: div_mean, std: div_std },
        multimodality: Some(MetricValue { mean: mm_mean, std: mm_std }),
    })
}

/// Bootstrap multimodality by resampling whole condition groups.
pub fn bootstrap_groups(
    groups: &[Tensor],
    repeats: usize,
    seed: u64,
    stream: u64,
) -> anyhow::Result<(Real, Real)> {
    use rand::Rng;
    if repeats < 2 {
        anyhow::bail!("bootstrap needs at least 2 repeats");
    }
    let mut values = Vec::with_capacity(repeats);
    let mut rng = derive_rng(seed, 0xB6, stream);
    for _ in 0..repeats {
        let resampled: Vec<Tensor> =
            (0..groups.len()).map(|_| groups[rng.gen_range(0..groups.len())].clone()).collect();
        values.push(multimodality(&resampled)?);
    }
    let mean = values.iter().sum::<Real>() / repeats as Real;
    let var =
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / (repeats - 1) as Real;
    Ok((mean, var.sqrt()))
}
