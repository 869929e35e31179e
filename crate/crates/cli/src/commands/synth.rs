//! Synthetic BVH corpus generation, for demos and end-to-end smoke runs
//! without real mocap data.

use std::path::PathBuf;

use clap::Args;
use inbetween_core::data::synthetic::write_bvh_corpus;
use inbetween_core::Real;

use crate::usage;

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory for .bvh files
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Frames per clip at the source rate
    #[arg(long, default_value_t = 600)]
    pub frames: usize,
    #[arg(long, default_value_t = 60.0)]
    pub fps: Real,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

pub fn run(args: SynthArgs) -> anyhow::Result<()> {
    if args.count == 0 || args.frames == 0 || args.fps <= 0.0 {
        return Err(usage("--count, --frames and --fps must be positive"));
    }
    let paths = write_bvh_corpus(&args.out, args.count, args.frames, args.fps, args.seed)?;
    println!("wrote {} synthetic clips to {}", paths.len(), args.out.display());
    Ok(())
}
