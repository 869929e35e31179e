//! Skeleton model and forward kinematics.
//!
//! [`forward_kinematics`] evaluates the homogeneous-transform chain product
//! per joint: each factor carries the joint's local rotation and its offset
//! from the parent's rest position, with translation in the bottom row
//! (row-vector convention), factors applied root-first. With identity
//! rotations the offsets telescope back to the rest pose.
//!
//! [`fk_positions`] is the same map expressed through tape operations,
//! vectorized over frames, so joint positions stay differentiable for the
//! position-space losses.

use crate::rotation::RotationMatrix;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::{CoreError, Result};

/// Joint hierarchy and rest pose. Parents always precede children, the root
/// (exactly one) has parent sentinel -1.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    parents: Vec<isize>,
    rest_offsets: Vec<[Real; 3]>,
    names: Vec<String>,
}

/// Global joint positions, meters, one 3-vector per joint.
#[derive(Clone, Debug, PartialEq)]
pub struct JointPositions(pub Vec<[Real; 3]>);

impl Skeleton {
    pub fn new(parents: Vec<isize>, rest_offsets: Vec<[Real; 3]>, names: Vec<String>) -> Result<Self> {
        if parents.is_empty() {
            return Err(CoreError::Skeleton("no joints".into()));
        }
        if parents.len() != rest_offsets.len() || parents.len() != names.len() {
            return Err(CoreError::Skeleton(format!(
                "{} parents, {} offsets, {} names",
                parents.len(),
                rest_offsets.len(),
                names.len()
            )));
        }
        let roots = parents.iter().filter(|&&p| p == -1).count();
        if roots != 1 {
            return Err(CoreError::Skeleton(format!("expected exactly one root, found {roots}")));
        }
        for (i, &p) in parents.iter().enumerate() {
            if p != -1 && (p < 0 || p as usize >= i) {
                return Err(CoreError::Skeleton(format!(
                    "joint {i} has parent {p}; parents must precede children"
                )));
            }
        }
        Ok(Self { parents, rest_offsets, names })
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        match self.parents[i] {
            -1 => None,
            p => Some(p as usize),
        }
    }

    pub fn parents(&self) -> &[isize] {
        &self.parents
    }

    pub fn rest_offset(&self, i: usize) -> [Real; 3] {
        self.rest_offsets[i]
    }

    pub fn rest_offsets(&self) -> &[[Real; 3]] {
        &self.rest_offsets
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Offset of joint `i` from its parent's rest position; the root keeps
    /// its own rest offset (its parent position is the zero vector).
    pub fn parent_offset(&self, i: usize) -> [Real; 3] {
        let o = self.rest_offsets[i];
        match self.parent(i) {
            None => o,
            Some(p) => {
                let po = self.rest_offsets[p];
                [o[0] - po[0], o[1] - po[1], o[2] - po[2]]
            }
        }
    }

    /// Ordered joint path from the root to joint `i`.
    pub fn kinematic_chain(&self, i: usize) -> Result<Vec<usize>> {
        if i >= self.joint_count() {
            return Err(CoreError::Skeleton(format!(
                "joint index {i} out of range for {} joints",
                self.joint_count()
            )));
        }
        let mut chain = vec![i];
        let mut j = i;
        while let Some(p) = self.parent(j) {
            chain.push(p);
            j = p;
        }
        chain.reverse();
        Ok(chain)
    }

    /// A 22-joint humanoid used as the canonical test fixture.
    pub fn canonical_humanoid() -> Self {
        let spec: [(&str, isize, [Real; 3]); 22] = [
            ("Hips", -1, [0.0, 0.95, 0.0]),
            ("Spine", 0, [0.0, 1.05, 0.0]),
            ("Spine1", 1, [0.0, 1.18, 0.0]),
            ("Spine2", 2, [0.0, 1.31, 0.0]),
            ("Neck", 3, [0.0, 1.45, 0.0]),
            ("Head", 4, [0.0, 1.58, 0.0]),
            ("LeftShoulder", 3, [0.06, 1.42, 0.0]),
            ("LeftArm", 6, [0.18, 1.42, 0.0]),
            ("LeftForeArm", 7, [0.44, 1.42, 0.0]),
            ("LeftHand", 8, [0.68, 1.42, 0.0]),
            ("RightShoulder", 3, [-0.06, 1.42, 0.0]),
            ("RightArm", 10, [-0.18, 1.42, 0.0]),
            ("RightForeArm", 11, [-0.44, 1.42, 0.0]),
            ("RightHand", 12, [-0.68, 1.42, 0.0]),
            ("LeftUpLeg", 0, [0.09, 0.88, 0.0]),
            ("LeftLeg", 14, [0.09, 0.47, 0.0]),
            ("LeftFoot", 15, [0.09, 0.07, 0.0]),
            ("LeftToe", 16, [0.09, 0.02, 0.12]),
            ("RightUpLeg", 0, [-0.09, 0.88, 0.0]),
            ("RightLeg", 18, [-0.09, 0.47, 0.0]),
            ("RightFoot", 19, [-0.09, 0.07, 0.0]),
            ("RightToe", 20, [-0.09, 0.02, 0.12]),
        ];
        let parents = spec.iter().map(|(_, p, _)| *p).collect();
        let offsets = spec.iter().map(|(_, _, o)| *o).collect();
        let names = spec.iter().map(|(n, _, _)| n.to_string()).collect();
        Self::new(parents, offsets, names).expect("fixture is well formed")
    }
}

fn mat4_mul(a: &[Real; 16], b: &[Real; 16]) -> [Real; 16] {
    let mut out = [0.0; 16];
    for i in 0..4 {
        for j in 0..4 {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += a[i * 4 + k] * b[k * 4 + j];
            }
            out[i * 4 + j] = acc;
        }
    }
    out
}

/// Homogeneous factor for one joint: local rotation in the upper-left block
/// (transposed for the row-vector convention), parent offset in the bottom
/// row.
fn joint_factor(rotation: &RotationMatrix, offset: [Real; 3]) -> [Real; 16] {
    let r = rotation.as_slice();
    [
        r[0], r[3], r[6], 0.0, //
        r[1], r[4], r[7], 0.0, //
        r[2], r[5], r[8], 0.0, //
        offset[0], offset[1], offset[2], 1.0,
    ]
}

/// Global joint positions from local rotations and the root position, via
/// the per-joint homogeneous chain product.
pub fn forward_kinematics(
    skeleton: &Skeleton,
    rotations: &[RotationMatrix],
    root_position: [Real; 3],
) -> Result<JointPositions> {
    let j = skeleton.joint_count();
    if rotations.len() != j {
        return Err(CoreError::Skeleton(format!(
            "{} rotations for {} joints",
            rotations.len(),
            j
        )));
    }
    let identity: [Real; 16] = {
        let mut m = [0.0; 16];
        for i in 0..4 {
            m[i * 4 + i] = 1.0;
        }
        m
    };
    let mut positions = Vec::with_capacity(j);
    for i in 0..j {
        let chain = skeleton.kinematic_chain(i)?;
        let mut product = identity;
        for &joint in &chain {
            let factor = joint_factor(&rotations[joint], skeleton.parent_offset(joint));
            product = mat4_mul(&factor, &product);
        }
        positions.push([
            product[12] + root_position[0],
            product[13] + root_position[1],
            product[14] + root_position[2],
        ]);
    }
    Ok(JointPositions(positions))
}

/// Differentiable forward kinematics over a whole sequence.
///
/// `features` is a `[frames, 3 + 6 J]` tape value laid out as root position
/// followed by per-joint 6D rotation features. Returns `[frames, 3 J]`
/// global joint positions. The 6D blocks go through the same Gram-Schmidt
/// construction as `sixd_to_matrix`, expressed in tape ops.
pub fn fk_positions(tape: &mut Tape, features: Var, skeleton: &Skeleton) -> Result<Var> {
    let j = skeleton.joint_count();
    let shape = tape.value(features).shape().to_vec();
    if shape.len() != 2 || shape[1] != 3 + 6 * j {
        return Err(CoreError::Dimension {
            op: "fk_positions",
            detail: format!("features shape {:?} does not match {} joints", shape, j),
        });
    }
    let frames = shape[0];
    let root_pos = tape.slice_cols(features, 0..3)?;

    let mut globals: Vec<Var> = Vec::with_capacity(j);
    let mut positions: Vec<Var> = Vec::with_capacity(j);
    for joint in 0..j {
        let base = 3 + 6 * joint;
        let a = tape.slice_cols(features, base..base + 3)?;
        let b = tape.slice_cols(features, base + 3..base + 6)?;
        let x = tape.normalize_rows(a)?;
        let d = tape.row_dot(x, b)?;
        let proj = tape.mul_col_vec(x, d)?;
        let resid = tape.sub(b, proj)?;
        let y = tape.normalize_rows(resid)?;
        let z = tape.row_cross(x, y)?;
        let local = tape.rot_from_cols(x, y, z)?;

        let offset = skeleton.parent_offset(joint);
        let offset_rows =
            tape.constant(&Tensor::new(vec![frames, 3], tile3(offset, frames))?);

        match skeleton.parent(joint) {
            None => {
                globals.push(local);
                positions.push(tape.add(root_pos, offset_rows)?);
            }
            Some(p) => {
                let global = tape.rot_compose(globals[p], local)?;
                let step = tape.rot_apply(globals[p], offset_rows)?;
                globals.push(global);
                positions.push(tape.add(positions[p], step)?);
            }
        }
    }

    let mut out = positions[0];
    for &p in &positions[1..] {
        out = tape.concat_cols(out, p)?;
    }
    Ok(out)
}

fn tile3(v: [Real; 3], rows: usize) -> Vec<Real> {
    let mut data = Vec::with_capacity(rows * 3);
    for _ in 0..rows {
        data.extend_from_slice(&v);
    }
    data
}
