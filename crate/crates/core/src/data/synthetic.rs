//! Synthetic skeletons and smooth motions for tests, demos, and pipeline
//! runs without mocap data.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bvh::serialize_bvh;
use super::{MotionSequence, Pose};
use crate::kinematics::Skeleton;
use crate::rotation::axis_angle_to_matrix;
use crate::tensor::Real;
use crate::Result;

/// Small branching skeleton: hips with spine/head and two legs.
pub fn test_skeleton() -> Skeleton {
    Skeleton::new(
        vec![-1, 0, 1, 0, 0],
        vec![
            [0.0, 0.9, 0.0],
            [0.0, 1.2, 0.0],
            [0.0, 1.5, 0.0],
            [0.1, 0.45, 0.0],
            [-0.1, 0.45, 0.0],
        ],
        ["Hips", "Spine", "Head", "LeftLeg", "RightLeg"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    )
    .expect("fixture is well formed")
}

/// Smooth, seeded motion: each joint swings about a fixed random axis with a
/// sinusoidal angle; the root drifts along a low-frequency curve.
pub fn synthetic_motion(
    skeleton: Arc<Skeleton>,
    frames: usize,
    fps: Real,
    seed: u64,
) -> MotionSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let j = skeleton.joint_count();

    struct Swing {
        axis: [Real; 3],
        amplitude: Real,
        cycles: Real,
        phase: Real,
    }
    let swings: Vec<Swing> = (0..j)
        .map(|_| {
            let raw: [Real; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let n = (raw.iter().map(|v| v * v).sum::<Real>()).sqrt().max(1e-6);
            Swing {
                axis: [raw[0] / n, raw[1] / n, raw[2] / n],
                amplitude: rng.gen_range(0.15..0.7),
                cycles: rng.gen_range(0.5..2.5),
                phase: rng.gen_range(0.0..std::f64::consts::TAU as Real),
            }
        })
        .collect();
    let drift: [Real; 3] = [rng.gen_range(-0.8..0.8), 0.0, rng.gen_range(-0.8..0.8)];
    let bob_amp = rng.gen_range(0.0..0.05);
    let bob_cycles = rng.gen_range(1.0..3.0);

    let mut poses = Vec::with_capacity(frames);
    for t in 0..frames {
        let u = t as Real / frames.max(1) as Real;
        let root = [
            drift[0] * u,
            bob_amp * (std::f64::consts::TAU as Real * bob_cycles * u).sin(),
            drift[2] * u,
        ];
        let rotations: Vec<_> = swings
            .iter()
            .map(|s| {
                let angle =
                    s.amplitude * (std::f64::consts::TAU as Real * s.cycles * u + s.phase).sin();
                axis_angle_to_matrix([s.axis[0] * angle, s.axis[1] * angle, s.axis[2] * angle])
            })
            .collect();
        poses.push(Pose::from_rotations(root, &rotations));
    }
    MotionSequence::from_poses(skeleton, &poses, fps).expect("synthetic poses are valid")
}

/// Write `count` synthetic BVH clips into `dir` and return their paths.
pub fn write_bvh_corpus(
    dir: &Path,
    count: usize,
    frames: usize,
    fps: Real,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let skeleton = Arc::new(test_skeleton());
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let seq = synthetic_motion(skeleton.clone(), frames, fps, seed.wrapping_add(i as u64));
        let text = serialize_bvh(&skeleton, &seq.to_raw()?)?;
        let path = dir.join(format!("synthetic_{i:03}.bvh"));
        std::fs::write(&path, text)?;
        paths.push(path);
    }
    Ok(paths)
}
