//! SVG frame-strip rendering: orthographic projections of FK joint
//! positions connected by skeleton edges, context frames highlighted.

use std::path::PathBuf;

use clap::Args;
use inbetween_core::kinematics::{forward_kinematics, Skeleton};
use inbetween_core::data::MotionSequence;
use inbetween_core::Real;

use crate::commands::generate::load_context_source;
use crate::usage;

#[derive(Args, Debug)]
pub struct ExportPlotArgs {
    /// Sequence to render: a .bvh clip or a chunk dataset file
    #[arg(long)]
    pub input: PathBuf,
    /// Chunk to render when the input is a dataset
    #[arg(long)]
    pub chunk_id: Option<String>,
    /// Output SVG path
    #[arg(long)]
    pub out: PathBuf,
    /// Render every n-th frame
    #[arg(long, default_value_t = 5)]
    pub stride: usize,
    /// Context frame indices to highlight, comma separated
    #[arg(long, value_delimiter = ',')]
    pub context: Option<Vec<usize>>,
}

pub fn run(args: ExportPlotArgs) -> anyhow::Result<()> {
    if args.stride == 0 {
        return Err(usage("--stride must be positive"));
    }
    let (skeleton, seq) = load_context_source(&args.input, args.chunk_id.as_deref())?;
    let context = args.context.unwrap_or_default();
    let svg = render_strip(&skeleton, &seq, args.stride, &context)?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&args.out, svg)?;
    let rendered = seq.frame_count().div_ceil(args.stride);
    println!("rendered {rendered} frames -> {}", args.out.display());
    Ok(())
}

/// Deterministic SVG strip: frames left to right, bones as line segments,
/// orthographic projection onto the x/y plane, context frames in red.
pub fn render_strip(
    skeleton: &Skeleton,
    seq: &MotionSequence,
    stride: usize,
    context: &[usize],
) -> anyhow::Result<String> {
    let frames: Vec<usize> = (0..seq.frame_count()).step_by(stride).collect();
    let mut poses = Vec::with_capacity(frames.len());
    for &i in &frames {
        let pose = seq.pose(i);
        let rots: Vec<_> = (0..skeleton.joint_count())
            .map(|j| pose.joint_rotation(j))
            .collect::<inbetween_core::Result<_>>()?;
        poses.push(forward_kinematics(skeleton, &rots, pose.root_position)?.0);
    }

    // bounds over all rendered frames, per frame slot width from the widest
    let mut min = [Real::INFINITY; 2];
    let mut max = [Real::NEG_INFINITY; 2];
    for frame in &poses {
        for p in frame {
            for a in 0..2 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
    }
    let width = (max[0] - min[0]).max(0.2);
    let height = (max[1] - min[1]).max(0.2);
    let scale = 120.0 / height;
    let slot = width * scale + 20.0;
    let total_w = slot * poses.len() as Real + 20.0;
    let total_h = height * scale + 40.0;

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\" viewBox=\"0 0 {:.0} {:.0}\">\n",
        total_w, total_h, total_w, total_h
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for (slot_idx, (frame_pos, &src_idx)) in poses.iter().zip(&frames).enumerate() {
        let highlighted = context.contains(&src_idx);
        let color = if highlighted { "#cc2222" } else { "#333333" };
        let x0 = 10.0 + slot * slot_idx as Real;
        let map = |p: &[Real; 3]| -> (Real, Real) {
            (x0 + (p[0] - min[0]) * scale, 20.0 + (max[1] - p[1]) * scale)
        };
        for j in 0..skeleton.joint_count() {
            if let Some(parent) = skeleton.parent(j) {
                let (x1, y1) = map(&frame_pos[parent]);
                let (x2, y2) = map(&frame_pos[j]);
                out.push_str(&format!(
                    "<line x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>\n"
                ));
            }
            let (cx, cy) = map(&frame_pos[j]);
            out.push_str(&format!(
                "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"2.2\" fill=\"{color}\"/>\n"
            ));
        }
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" fill=\"{color}\">{}</text>\n",
            x0,
            total_h - 8.0,
            src_idx
        ));
    }
    out.push_str("</svg>\n");
    Ok(out)
}
