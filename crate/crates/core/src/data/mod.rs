//! Motion data model, BVH ingestion, preprocessing pipeline, and dataset
//! persistence.
//!
//! A pose is a root position (relative to the sequence's first frame once
//! chunked) plus per-joint rotation features, 6 values per joint. A motion
//! sequence is a `[frames, 3 + 6 J]` row-major block with frame-rate
//! metadata and a skeleton reference.

pub mod bvh;
pub mod dataset;
pub mod pipeline;
pub mod synthetic;

use std::sync::Arc;

use crate::kinematics::Skeleton;
use crate::rotation::{matrix_to_sixd, sixd_to_matrix, RotationMatrix, SixD};
use crate::tensor::{Real, Tensor};
use crate::{CoreError, Result};

pub use bvh::{parse_bvh, serialize_bvh, RawMotion};
pub use dataset::{ChunkDataset, ChunkId, ChunkRecord, Manifest};
pub use pipeline::{
    augment_rotations, chunk, downsample, sample_context, split_dataset, DatasetSplit, UpAxis,
};

/// Rotation feature width per joint (first two columns of the rotation
/// matrix).
pub const ROTATION_DIM: usize = 6;

/// Feature width of one pose for a skeleton with `joints` joints.
pub fn feature_dim(joints: usize) -> usize {
    3 + ROTATION_DIM * joints
}

/// One frame: root position plus per-joint rotation features.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub root_position: [Real; 3],
    pub joint_features: Vec<Real>,
}

impl Pose {
    pub fn from_rotations(root_position: [Real; 3], rotations: &[RotationMatrix]) -> Self {
        let mut joint_features = Vec::with_capacity(rotations.len() * ROTATION_DIM);
        for r in rotations {
            joint_features.extend_from_slice(matrix_to_sixd(r).as_slice());
        }
        Self { root_position, joint_features }
    }

    pub fn joint_count(&self) -> usize {
        self.joint_features.len() / ROTATION_DIM
    }

    /// Decode the 6-value group of one joint into a rotation matrix.
    pub fn joint_rotation(&self, joint: usize) -> Result<RotationMatrix> {
        let base = joint * ROTATION_DIM;
        let g = &self.joint_features[base..base + ROTATION_DIM];
        sixd_to_matrix(&SixD([g[0], g[1], g[2], g[3], g[4], g[5]]))
    }

    /// Check the pose contract for a given joint count: the feature width
    /// matches and every rotation group decodes.
    pub fn validate(&self, joints: usize) -> Result<()> {
        if self.joint_features.len() != joints * ROTATION_DIM {
            return Err(CoreError::MotionData(format!(
                "pose has {} joint features, expected {}",
                self.joint_features.len(),
                joints * ROTATION_DIM
            )));
        }
        for j in 0..joints {
            self.joint_rotation(j)?;
        }
        Ok(())
    }

    fn flat(&self) -> Vec<Real> {
        let mut row = Vec::with_capacity(3 + self.joint_features.len());
        row.extend_from_slice(&self.root_position);
        row.extend_from_slice(&self.joint_features);
        row
    }
}

/// A motion block: `frames x feature_dim` values at a frame rate, bound to
/// the skeleton they animate.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    frames: Vec<Real>,
    frame_count: usize,
    fps: Real,
    skeleton: Arc<Skeleton>,
}

impl MotionSequence {
    pub fn new(skeleton: Arc<Skeleton>, frames: Vec<Real>, frame_count: usize, fps: Real) -> Result<Self> {
        let f = feature_dim(skeleton.joint_count());
        if frames.len() != frame_count * f {
            return Err(CoreError::MotionData(format!(
                "{} values for {} frames of width {}",
                frames.len(),
                frame_count,
                f
            )));
        }
        if fps <= 0.0 {
            return Err(CoreError::MotionData(format!("non-positive fps {fps}")));
        }
        Ok(Self { frames, frame_count, fps, skeleton })
    }

    pub fn from_poses(skeleton: Arc<Skeleton>, poses: &[Pose], fps: Real) -> Result<Self> {
        let mut frames = Vec::with_capacity(poses.len() * feature_dim(skeleton.joint_count()));
        for p in poses {
            p.validate(skeleton.joint_count())?;
            frames.extend_from_slice(&p.flat());
        }
        Self::new(skeleton, frames, poses.len(), fps)
    }

    /// Decode a raw rotation-matrix motion into 6D features.
    pub fn from_raw(skeleton: Arc<Skeleton>, raw: &RawMotion) -> Result<Self> {
        let poses: Vec<Pose> = raw
            .root_positions
            .iter()
            .zip(&raw.rotations)
            .map(|(p, rots)| Pose::from_rotations(*p, rots))
            .collect();
        Self::from_poses(skeleton, &poses, raw.fps)
    }

    /// Decode back to root positions and rotation matrices.
    pub fn to_raw(&self) -> Result<RawMotion> {
        let j = self.skeleton.joint_count();
        let mut root_positions = Vec::with_capacity(self.frame_count);
        let mut rotations = Vec::with_capacity(self.frame_count);
        for i in 0..self.frame_count {
            let pose = self.pose(i);
            let mut rots = Vec::with_capacity(j);
            for joint in 0..j {
                rots.push(pose.joint_rotation(joint)?);
            }
            root_positions.push(pose.root_position);
            rotations.push(rots);
        }
        Ok(RawMotion { root_positions, rotations, fps: self.fps })
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn feature_dim(&self) -> usize {
        feature_dim(self.skeleton.joint_count())
    }

    pub fn fps(&self) -> Real {
        self.fps
    }

    pub fn skeleton(&self) -> &Arc<Skeleton> {
        &self.skeleton
    }

    pub fn frame(&self, i: usize) -> &[Real] {
        let f = self.feature_dim();
        &self.frames[i * f..(i + 1) * f]
    }

    pub fn frames_flat(&self) -> &[Real] {
        &self.frames
    }

    pub fn pose(&self, i: usize) -> Pose {
        let row = self.frame(i);
        Pose {
            root_position: [row[0], row[1], row[2]],
            joint_features: row[3..].to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.frame_count, self.feature_dim()], self.frames.clone())
            .expect("sequence layout is consistent")
    }

    pub fn from_tensor(skeleton: Arc<Skeleton>, t: &Tensor, fps: Real) -> Result<Self> {
        let f = feature_dim(skeleton.joint_count());
        if t.shape().len() != 2 || t.shape()[1] != f {
            return Err(CoreError::MotionData(format!(
                "tensor shape {:?} does not match feature width {f}",
                t.shape()
            )));
        }
        Self::new(skeleton, t.data().to_vec(), t.shape()[0], fps)
    }

    /// Validate every pose against the skeleton.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.frame_count {
            self.pose(i)
                .validate(self.skeleton.joint_count())
                .map_err(|e| CoreError::MotionData(format!("frame {i}: {e}")))?;
        }
        Ok(())
    }
}

/// Sparse keyframe condition: `poses` at strictly increasing `indices`
/// inside the block.
#[derive(Clone, Debug, PartialEq)]
pub struct Context {
    pub poses: Vec<Real>,
    pub indices: Vec<usize>,
    pub feature_dim: usize,
}

impl Context {
    pub fn new(poses: Vec<Real>, indices: Vec<usize>, feature_dim: usize) -> Result<Self> {
        if poses.len() != indices.len() * feature_dim {
            return Err(CoreError::MotionData(format!(
                "{} pose values for {} indices of width {feature_dim}",
                poses.len(),
                indices.len()
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoreError::MotionData("context indices must be strictly increasing".into()));
        }
        Ok(Self { poses, indices, feature_dim })
    }

    /// Build a context from chosen frames of a sequence.
    pub fn from_sequence(seq: &MotionSequence, indices: &[usize]) -> Result<Self> {
        let f = seq.feature_dim();
        let mut poses = Vec::with_capacity(indices.len() * f);
        for &i in indices {
            if i >= seq.frame_count() {
                return Err(CoreError::MotionData(format!(
                    "context index {i} out of range for {} frames",
                    seq.frame_count()
                )));
            }
            poses.extend_from_slice(seq.frame(i));
        }
        Self::new(poses, indices.to_vec(), f)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn pose_row(&self, k: usize) -> &[Real] {
        &self.poses[k * self.feature_dim..(k + 1) * self.feature_dim]
    }

    pub fn poses_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.feature_dim], self.poses.clone())
            .expect("context layout is consistent")
    }
}
