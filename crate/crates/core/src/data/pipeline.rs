//! Preprocessing pipeline: downsampling, chunking, yaw augmentation,
//! context sampling, and dataset splitting.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::ChunkId;
use super::{Context, MotionSequence};
use crate::rotation::{axis_angle_to_matrix, matrix_to_sixd};
use crate::tensor::Real;
use crate::{CoreError, Result};

/// Which world axis is vertical. BVH convention is +Y; +Z sources are
/// supported through configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpAxis {
    #[default]
    Y,
    Z,
}

impl UpAxis {
    fn scaled(self, angle: Real) -> [Real; 3] {
        match self {
            UpAxis::Y => [0.0, angle, 0.0],
            UpAxis::Z => [0.0, 0.0, angle],
        }
    }
}

/// Keep every `stride`-th frame, stride = round(source_fps / target_fps).
/// The output frame rate is recorded as source_fps / stride, which may
/// differ from the requested target.
pub fn downsample(seq: &MotionSequence, target_fps: Real) -> Result<MotionSequence> {
    if target_fps <= 0.0 {
        return Err(CoreError::MotionData(format!("non-positive target fps {target_fps}")));
    }
    if target_fps > seq.fps() {
        return Err(CoreError::MotionData(format!(
            "target fps {target_fps} exceeds source fps {}",
            seq.fps()
        )));
    }
    let stride = (seq.fps() / target_fps).round() as usize;
    let stride = stride.max(1);
    let f = seq.feature_dim();
    let mut frames = Vec::new();
    let mut count = 0;
    let mut i = 0;
    while i < seq.frame_count() {
        frames.extend_from_slice(seq.frame(i));
        count += 1;
        i += stride;
    }
    let _ = f;
    MotionSequence::new(seq.skeleton().clone(), frames, count, seq.fps() / stride as Real)
}

/// Split into consecutive non-overlapping blocks of `block` frames, dropping
/// any trailing remainder. Each chunk's root positions are re-based so its
/// first frame sits at the origin.
pub fn chunk(seq: &MotionSequence, block: usize) -> Result<Vec<MotionSequence>> {
    if block == 0 {
        return Err(CoreError::MotionData("block size must be positive".into()));
    }
    let f = seq.feature_dim();
    let mut out = Vec::new();
    let full = seq.frame_count() / block;
    for c in 0..full {
        let start = c * block;
        let origin = {
            let first = seq.frame(start);
            [first[0], first[1], first[2]]
        };
        let mut frames = Vec::with_capacity(block * f);
        for i in start..start + block {
            let row = seq.frame(i);
            frames.push(row[0] - origin[0]);
            frames.push(row[1] - origin[1]);
            frames.push(row[2] - origin[2]);
            frames.extend_from_slice(&row[3..]);
        }
        out.push(MotionSequence::new(seq.skeleton().clone(), frames, block, seq.fps())?);
    }
    Ok(out)
}

/// Rotate one sequence by a yaw angle about the vertical axis: root
/// positions rotate about the origin and the root joint rotation is
/// left-multiplied; non-root joints are parent-relative and stay unchanged.
pub fn rotate_about_vertical(seq: &MotionSequence, angle: Real, up: UpAxis) -> Result<MotionSequence> {
    let q = axis_angle_to_matrix(up.scaled(angle));
    let f = seq.feature_dim();
    let mut frames = Vec::with_capacity(seq.frame_count() * f);
    for i in 0..seq.frame_count() {
        let pose = seq.pose(i);
        let pos = q.apply(pose.root_position);
        frames.extend_from_slice(&pos);
        let root_rot = pose.joint_rotation(0)?;
        let turned = q.compose(&root_rot);
        frames.extend_from_slice(matrix_to_sixd(&turned).as_slice());
        frames.extend_from_slice(&pose.joint_features[super::ROTATION_DIM..]);
    }
    MotionSequence::new(seq.skeleton().clone(), frames, seq.frame_count(), seq.fps())
}

/// `count` randomly yawed copies of a chunk, angles uniform in [0, 2 pi).
pub fn augment_rotations(
    seq: &MotionSequence,
    count: usize,
    up: UpAxis,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MotionSequence>> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU) as Real;
        out.push(rotate_about_vertical(seq, angle, up)?);
    }
    Ok(out)
}

/// Draw `len` distinct frame indices uniformly without replacement, sorted,
/// and copy their poses. `len` must be in [1, frames / 2].
pub fn sample_context(seq: &MotionSequence, len: usize, rng: &mut ChaCha8Rng) -> Result<Context> {
    let max = seq.frame_count() / 2;
    if len < 1 || len > max {
        return Err(CoreError::ContextLength { len, max });
    }
    let mut indices = rand::seq::index::sample(rng, seq.frame_count(), len).into_vec();
    indices.sort_unstable();
    Context::from_sequence(seq, &indices)
}

/// Train/validation/test chunk id lists with the seed that produced them.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<ChunkId>,
    pub val: Vec<ChunkId>,
    pub test: Vec<ChunkId>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn of(&self, id: &ChunkId) -> Option<&'static str> {
        if self.train.contains(id) {
            Some("train")
        } else if self.val.contains(id) {
            Some("val")
        } else if self.test.contains(id) {
            Some("test")
        } else {
            None
        }
    }
}

/// Deterministic 80/10/10 split (floor, floor, remainder) over source
/// chunks. Augmented copies share their source chunk's group and always land
/// in the same partition, so augmentation cannot leak across splits.
pub fn split_dataset(ids: &[ChunkId], seed: u64) -> Result<DatasetSplit> {
    // group augmented variants with their source chunk
    let mut groups: Vec<(String, usize)> = Vec::new();
    for id in ids {
        let key = (id.source.clone(), id.index);
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    if groups.len() < 10 {
        return Err(CoreError::MotionData(format!(
            "need at least 10 source chunks to split, got {}",
            groups.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);

    let n = groups.len();
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let assign = |key: &(String, usize)| -> usize {
        let pos = groups.iter().position(|g| g == key).expect("grouped above");
        if pos < n_train {
            0
        } else if pos < n_train + n_val {
            1
        } else {
            2
        }
    };

    let mut split = DatasetSplit { train: Vec::new(), val: Vec::new(), test: Vec::new(), seed };
    for id in ids {
        let key = (id.source.clone(), id.index);
        match assign(&key) {
            0 => split.train.push(id.clone()),
            1 => split.val.push(id.clone()),
            _ => split.test.push(id.clone()),
        }
    }
    Ok(split)
}
