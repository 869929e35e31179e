//! BVH mocap text format: parsing and canonical serialization.
//!
//! Parsing honors per-joint Euler channel orders (degrees, intrinsic,
//! applied in listed order) and converts OFFSET lines into absolute
//! rest-pose positions. End Site blocks are consumed but not kept as
//! joints. Serialization emits a canonical channel layout (root:
//! translation + ZXY rotation, joints: ZXY rotation), so
//! parse -> serialize -> parse is a fixed point on skeleton and frames.

use std::sync::Arc;

use crate::kinematics::Skeleton;
use crate::rotation::RotationMatrix;
use crate::tensor::Real;
use crate::{CoreError, Result};

/// Frames of root positions and per-joint local rotation matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct RawMotion {
    pub root_positions: Vec<[Real; 3]>,
    pub rotations: Vec<Vec<RotationMatrix>>,
    pub fps: Real,
}

impl RawMotion {
    pub fn frame_count(&self) -> usize {
        self.root_positions.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Channel {
    Xposition,
    Yposition,
    Zposition,
    Xrotation,
    Yrotation,
    Zrotation,
}

impl Channel {
    fn parse(s: &str, line: usize) -> Result<Self> {
        match s {
            "Xposition" => Ok(Self::Xposition),
            "Yposition" => Ok(Self::Yposition),
            "Zposition" => Ok(Self::Zposition),
            "Xrotation" => Ok(Self::Xrotation),
            "Yrotation" => Ok(Self::Yrotation),
            "Zrotation" => Ok(Self::Zrotation),
            other => Err(CoreError::BvhParse {
                line,
                message: format!("unsupported channel name {other:?}"),
            }),
        }
    }

    fn is_position(self) -> bool {
        matches!(self, Self::Xposition | Self::Yposition | Self::Zposition)
    }
}

struct JointDecl {
    name: String,
    parent: isize,
    offset: [Real; 3],
    channels: Vec<Channel>,
}

struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self { iter: text.lines().enumerate() }
    }

    /// Next non-blank line as (1-based line number, trimmed text).
    fn next_content(&mut self) -> Option<(usize, &'a str)> {
        for (i, raw) in self.iter.by_ref() {
            let t = raw.trim();
            if !t.is_empty() {
                return Some((i + 1, t));
            }
        }
        None
    }
}

fn expect_line(lines: &mut Lines, what: &str) -> Result<(usize, String)> {
    lines
        .next_content()
        .map(|(n, s)| (n, s.to_string()))
        .ok_or_else(|| CoreError::BvhParse {
            line: 0,
            message: format!("unexpected end of file, expected {what}"),
        })
}

fn parse_floats(s: &str, count: usize, line: usize) -> Result<Vec<Real>> {
    let vals: Vec<Real> = s
        .split_whitespace()
        .map(|t| t.parse::<f64>().map(|v| v as Real))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CoreError::BvhParse { line, message: format!("bad number: {e}") })?;
    if vals.len() != count {
        return Err(CoreError::BvhParse {
            line,
            message: format!("expected {count} values, found {}", vals.len()),
        });
    }
    Ok(vals)
}

/// Parse BVH text into a skeleton and raw motion.
pub fn parse_bvh(text: &str) -> Result<(Arc<Skeleton>, RawMotion)> {
    let mut lines = Lines::new(text);
    let (n, first) = expect_line(&mut lines, "HIERARCHY")?;
    if first != "HIERARCHY" {
        return Err(CoreError::BvhParse { line: n, message: format!("expected HIERARCHY, found {first:?}") });
    }

    let mut joints: Vec<JointDecl> = Vec::new();
    // stack of joint indices whose blocks are open
    let mut stack: Vec<usize> = Vec::new();
    let motion_line;

    loop {
        let (n, line) = expect_line(&mut lines, "joint declaration or MOTION")?;
        if line == "MOTION" {
            if !stack.is_empty() {
                return Err(CoreError::BvhParse { line: n, message: "MOTION inside an open joint block".into() });
            }
            motion_line = n;
            break;
        }
        if let Some(rest) = line.strip_prefix("ROOT ").or_else(|| line.strip_prefix("JOINT ")) {
            let is_root = line.starts_with("ROOT ");
            if is_root && !joints.is_empty() {
                return Err(CoreError::BvhParse { line: n, message: "multiple ROOT declarations".into() });
            }
            if !is_root && stack.is_empty() {
                return Err(CoreError::BvhParse { line: n, message: "JOINT outside a ROOT block".into() });
            }
            let name = rest.trim().to_string();
            let parent = if is_root { -1 } else { *stack.last().unwrap() as isize };

            let (bn, brace) = expect_line(&mut lines, "'{'")?;
            if brace != "{" {
                return Err(CoreError::BvhParse { line: bn, message: format!("expected '{{', found {brace:?}") });
            }
            let (on, off_line) = expect_line(&mut lines, "OFFSET")?;
            let off = off_line.strip_prefix("OFFSET").ok_or_else(|| CoreError::BvhParse {
                line: on,
                message: format!("expected OFFSET, found {off_line:?}"),
            })?;
            let off = parse_floats(off, 3, on)?;
            let (cn, ch_line) = expect_line(&mut lines, "CHANNELS")?;
            let ch = ch_line.strip_prefix("CHANNELS").ok_or_else(|| CoreError::BvhParse {
                line: cn,
                message: format!("expected CHANNELS, found {ch_line:?}"),
            })?;
            let mut toks = ch.split_whitespace();
            let count: usize = toks
                .next()
                .ok_or_else(|| CoreError::BvhParse { line: cn, message: "missing channel count".into() })?
                .parse()
                .map_err(|e| CoreError::BvhParse { line: cn, message: format!("bad channel count: {e}") })?;
            let channels: Vec<Channel> = toks
                .map(|t| Channel::parse(t, cn))
                .collect::<Result<_>>()?;
            if channels.len() != count {
                return Err(CoreError::BvhParse {
                    line: cn,
                    message: format!("declared {count} channels, listed {}", channels.len()),
                });
            }
            if !is_root && channels.iter().any(|c| c.is_position()) {
                return Err(CoreError::BvhParse {
                    line: cn,
                    message: "position channels are only supported on the root".into(),
                });
            }
            joints.push(JointDecl { name, parent, offset: [off[0], off[1], off[2]], channels });
            stack.push(joints.len() - 1);
        } else if line.starts_with("End Site") {
            // consume the block, keep nothing
            let (bn, brace) = expect_line(&mut lines, "'{'")?;
            if brace != "{" {
                return Err(CoreError::BvhParse { line: bn, message: format!("expected '{{', found {brace:?}") });
            }
            let (on, off_line) = expect_line(&mut lines, "OFFSET")?;
            if !off_line.starts_with("OFFSET") {
                return Err(CoreError::BvhParse { line: on, message: format!("expected OFFSET, found {off_line:?}") });
            }
            let (en, end_brace) = expect_line(&mut lines, "'}'")?;
            if end_brace != "}" {
                return Err(CoreError::BvhParse { line: en, message: format!("expected '}}', found {end_brace:?}") });
            }
        } else if line == "}" {
            if stack.pop().is_none() {
                return Err(CoreError::BvhParse { line: n, message: "unbalanced '}'".into() });
            }
        } else {
            return Err(CoreError::BvhParse { line: n, message: format!("unexpected token {line:?}") });
        }
    }

    if joints.is_empty() {
        return Err(CoreError::BvhParse { line: motion_line, message: "no joints declared".into() });
    }

    // absolute rest positions from parent-relative offsets
    let mut rest = Vec::with_capacity(joints.len());
    for j in &joints {
        let abs = if j.parent < 0 {
            j.offset
        } else {
            let p: [Real; 3] = rest[j.parent as usize];
            [j.offset[0] + p[0], j.offset[1] + p[1], j.offset[2] + p[2]]
        };
        rest.push(abs);
    }
    let skeleton = Arc::new(Skeleton::new(
        joints.iter().map(|j| j.parent).collect(),
        rest,
        joints.iter().map(|j| j.name.clone()).collect(),
    )?);

    // MOTION section
    let (fn_, frames_line) = expect_line(&mut lines, "Frames:")?;
    let frames: usize = frames_line
        .strip_prefix("Frames:")
        .ok_or_else(|| CoreError::BvhParse { line: fn_, message: format!("expected Frames:, found {frames_line:?}") })?
        .trim()
        .parse()
        .map_err(|e| CoreError::BvhParse { line: fn_, message: format!("bad frame count: {e}") })?;
    let (tn, time_line) = expect_line(&mut lines, "Frame Time:")?;
    let frame_time: f64 = time_line
        .strip_prefix("Frame Time:")
        .ok_or_else(|| CoreError::BvhParse { line: tn, message: format!("expected Frame Time:, found {time_line:?}") })?
        .trim()
        .parse()
        .map_err(|e| CoreError::BvhParse { line: tn, message: format!("bad frame time: {e}") })?;
    if frame_time <= 0.0 {
        return Err(CoreError::BvhParse { line: tn, message: format!("non-positive frame time {frame_time}") });
    }
    let fps = (1.0 / frame_time) as Real;

    let total_channels: usize = joints.iter().map(|j| j.channels.len()).sum();
    let mut root_positions = Vec::with_capacity(frames);
    let mut rotations = Vec::with_capacity(frames);
    for _ in 0..frames {
        let (dn, row) = expect_line(&mut lines, "frame data")?;
        let vals = parse_floats(&row, total_channels, dn)?;
        let mut cursor = 0;
        let mut root_pos = [0.0; 3];
        let mut frame_rots = Vec::with_capacity(joints.len());
        for j in &joints {
            let mut rot = RotationMatrix::identity();
            for ch in &j.channels {
                let v = vals[cursor];
                cursor += 1;
                match ch {
                    Channel::Xposition => root_pos[0] = v,
                    Channel::Yposition => root_pos[1] = v,
                    Channel::Zposition => root_pos[2] = v,
                    Channel::Xrotation => rot = rot.compose(&rot_x(v.to_radians())),
                    Channel::Yrotation => rot = rot.compose(&rot_y(v.to_radians())),
                    Channel::Zrotation => rot = rot.compose(&rot_z(v.to_radians())),
                }
            }
            frame_rots.push(rot);
        }
        root_positions.push(root_pos);
        rotations.push(frame_rots);
    }
    if let Some((line, _)) = lines.next_content() {
        return Err(CoreError::BvhParse {
            line,
            message: format!("extra data after {frames} declared frames"),
        });
    }

    Ok((skeleton, RawMotion { root_positions, rotations, fps }))
}

fn rot_x(a: Real) -> RotationMatrix {
    crate::rotation::axis_angle_to_matrix([a, 0.0, 0.0])
}

fn rot_y(a: Real) -> RotationMatrix {
    crate::rotation::axis_angle_to_matrix([0.0, a, 0.0])
}

fn rot_z(a: Real) -> RotationMatrix {
    crate::rotation::axis_angle_to_matrix([0.0, 0.0, a])
}

/// ZXY Euler angles (radians) whose composition Rz * Rx * Ry reproduces `m`.
fn matrix_to_zxy(m: &RotationMatrix) -> [Real; 3] {
    let e = m.as_slice();
    // with R = Rz(z) Rx(x) Ry(y): e[7] = sin x, e[6] = -cos x sin y,
    // e[8] = cos x cos y, e[1] = -sin z cos x, e[4] = cos z cos x
    let sx = e[7].clamp(-1.0, 1.0);
    let x = sx.asin();
    if sx.abs() > 1.0 - 1e-9 {
        // gimbal: fold y into z
        let z = e[3].atan2(e[0]);
        return [z, x, 0.0];
    }
    let y = (-e[6]).atan2(e[8]);
    let z = (-e[1]).atan2(e[4]);
    [z, x, y]
}

/// Serialize to canonical BVH text: ZXY rotation channels, root translation,
/// leaf joints closed with zero-offset End Sites.
pub fn serialize_bvh(skeleton: &Skeleton, motion: &RawMotion) -> Result<String> {
    let j = skeleton.joint_count();
    for (i, rots) in motion.rotations.iter().enumerate() {
        if rots.len() != j {
            return Err(CoreError::MotionData(format!(
                "frame {i} has {} rotations for {} joints",
                rots.len(),
                j
            )));
        }
    }
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); j];
    for i in 0..j {
        if let Some(p) = skeleton.parent(i) {
            children[p].push(i);
        }
    }
    let root = (0..j).find(|&i| skeleton.parent(i).is_none()).expect("validated skeleton");

    let mut out = String::from("HIERARCHY\n");
    write_joint(&mut out, skeleton, &children, root, 0);
    out.push_str("MOTION\n");
    out.push_str(&format!("Frames: {}\n", motion.frame_count()));
    out.push_str(&format!("Frame Time: {}\n", 1.0 / motion.fps));
    for (pos, rots) in motion.root_positions.iter().zip(&motion.rotations) {
        let mut row: Vec<String> = Vec::with_capacity(3 + 3 * j);
        row.push(fmt6(pos[0]));
        row.push(fmt6(pos[1]));
        row.push(fmt6(pos[2]));
        for rot in rots {
            let [z, x, y] = matrix_to_zxy(rot);
            row.push(fmt6(z.to_degrees()));
            row.push(fmt6(x.to_degrees()));
            row.push(fmt6(y.to_degrees()));
        }
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    Ok(out)
}

fn fmt6(v: Real) -> String {
    format!("{:.6}", v)
}

fn write_joint(out: &mut String, s: &Skeleton, children: &[Vec<usize>], i: usize, depth: usize) {
    let pad = "  ".repeat(depth);
    let kw = if s.parent(i).is_none() { "ROOT" } else { "JOINT" };
    let off = s.parent_offset(i);
    out.push_str(&format!("{pad}{kw} {}\n{pad}{{\n", s.name(i)));
    out.push_str(&format!("{pad}  OFFSET {} {} {}\n", fmt6(off[0]), fmt6(off[1]), fmt6(off[2])));
    if s.parent(i).is_none() {
        out.push_str(&format!(
            "{pad}  CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation\n"
        ));
    } else {
        out.push_str(&format!("{pad}  CHANNELS 3 Zrotation Xrotation Yrotation\n"));
    }
    if children[i].is_empty() {
        out.push_str(&format!(
            "{pad}  End Site\n{pad}  {{\n{pad}    OFFSET 0.000000 0.000000 0.000000\n{pad}  }}\n"
        ));
    } else {
        for &c in &children[i] {
            write_joint(out, s, children, c, depth + 1);
        }
    }
    out.push_str(&format!("{pad}}}\n"));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::{axis_angle_to_matrix, random_rotation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TWO_JOINT_ZERO_MOTION: &str = "\
HIERARCHY
ROOT Hips
{
  OFFSET 0.0 1.0 0.0
  CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation
  JOINT Chest
  {
    OFFSET 0.0 0.5 0.0
    CHANNELS 3 Zrotation Xrotation Yrotation
    End Site
    {
      OFFSET 0.0 0.25 0.0
    }
  }
}
MOTION
Frames: 2
Frame Time: 0.066667
0 0 0 0 0 0 0 0 0
0 0 0 0 0 0 0 0 0
";

    #[test]
    fn minimal_file_recovers_rest_pose() {
        let (skeleton, motion) = parse_bvh(TWO_JOINT_ZERO_MOTION).unwrap();
        assert_eq!(skeleton.joint_count(), 2);
        assert_eq!(skeleton.name(0), "Hips");
        assert_eq!(skeleton.rest_offset(0), [0.0, 1.0, 0.0]);
        // absolute: child offset accumulates onto the root
        assert_eq!(skeleton.rest_offset(1), [0.0, 1.5, 0.0]);
        assert_eq!(motion.frame_count(), 2);
        assert!((motion.fps - 15.0).abs() < 1e-3);

        // zero motion: FK reproduces the OFFSET values
        let out = crate::kinematics::forward_kinematics(
            &skeleton,
            &motion.rotations[0],
            motion.root_positions[0],
        )
        .unwrap();
        assert_eq!(out.0[0], [0.0, 1.0, 0.0]);
        assert_eq!(out.0[1], [0.0, 1.5, 0.0]);
    }

    #[test]
    fn single_joint_z_rotation_matches_axis_angle() {
        let text = "\
HIERARCHY
ROOT Only
{
  OFFSET 0 0 0
  CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation
  End Site
  {
    OFFSET 0 1 0
  }
}
MOTION
Frames: 1
Frame Time: 0.0333333
0 0 0 90 0 0
";
        let (_, motion) = parse_bvh(text).unwrap();
        let expected = axis_angle_to_matrix([0.0, 0.0, std::f64::consts::FRAC_PI_2 as Real]);
        assert!(motion.rotations[0][0].frobenius_distance(&expected) < 1e-9);
    }

    #[test]
    fn channel_order_is_honored() {
        // Xrotation then Zrotation differs from Zrotation then Xrotation
        let make = |channels: &str| {
            format!(
                "HIERARCHY\nROOT A\n{{\n  OFFSET 0 0 0\n  CHANNELS 2 {channels}\n  End Site\n  {{\n    OFFSET 0 1 0\n  }}\n}}\nMOTION\nFrames: 1\nFrame Time: 0.1\n45 30\n"
            )
        };
        let (_, xz) = parse_bvh(&make("Xrotation Zrotation")).unwrap();
        let (_, zx) = parse_bvh(&make("Zrotation Xrotation")).unwrap();
        let rx = axis_angle_to_matrix([(45.0 as Real).to_radians(), 0.0, 0.0]);
        let rz30 = axis_angle_to_matrix([0.0, 0.0, (30.0 as Real).to_radians()]);
        let rz45 = axis_angle_to_matrix([0.0, 0.0, (45.0 as Real).to_radians()]);
        let rx30 = axis_angle_to_matrix([(30.0 as Real).to_radians(), 0.0, 0.0]);
        assert!(xz.rotations[0][0].frobenius_distance(&rx.compose(&rz30)) < 1e-9);
        assert!(zx.rotations[0][0].frobenius_distance(&rz45.compose(&rx30)) < 1e-9);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad_channel = TWO_JOINT_ZERO_MOTION.replace(
            "CHANNELS 3 Zrotation Xrotation Yrotation",
            "CHANNELS 3 Zrotation Wrotation Yrotation",
        );
        match parse_bvh(&bad_channel) {
            Err(CoreError::BvhParse { line, message }) => {
                assert_eq!(line, 9);
                assert!(message.contains("Wrotation"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }

        let short_row = TWO_JOINT_ZERO_MOTION.replace("0 0 0 0 0 0 0 0 0\n0 0 0 0 0 0 0 0 0", "0 0 0 0 0 0 0 0 0\n0 0 0");
        match parse_bvh(&short_row) {
            Err(CoreError::BvhParse { line, .. }) => assert_eq!(line, 20),
            other => panic!("expected parse error, got {other:?}"),
        }

        assert!(parse_bvh("MOTION\n").is_err());
    }

    #[test]
    fn position_channels_outside_root_rejected() {
        let text = TWO_JOINT_ZERO_MOTION.replace(
            "CHANNELS 3 Zrotation Xrotation Yrotation",
            "CHANNELS 4 Xposition Zrotation Xrotation Yrotation",
        );
        assert!(parse_bvh(&text).is_err());
    }

    fn random_raw_motion(skeleton: &Skeleton, frames: usize, seed: u64) -> RawMotion {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let j = skeleton.joint_count();
        RawMotion {
            root_positions: (0..frames)
                .map(|_| std::array::from_fn(|_| r.gen_range(-2.0..2.0)))
                .collect(),
            rotations: (0..frames)
                .map(|_| (0..j).map(|_| random_rotation(&mut r)).collect())
                .collect(),
            fps: 30.0,
        }
    }

    #[test]
    fn round_trip_is_a_fixed_point() {
        let s = Skeleton::canonical_humanoid();
        let motion = random_raw_motion(&s, 5, 99);
        let text = serialize_bvh(&s, &motion).unwrap();
        let (s2, m2) = parse_bvh(&text).unwrap();
        assert_eq!(s2.joint_count(), s.joint_count());
        for i in 0..s.joint_count() {
            assert_eq!(s2.name(i), s.name(i));
            for c in 0..3 {
                assert!((s2.rest_offset(i)[c] - s.rest_offset(i)[c]).abs() < 1e-6);
            }
        }
        for f in 0..motion.frame_count() {
            for c in 0..3 {
                assert!((m2.root_positions[f][c] - motion.root_positions[f][c]).abs() < 1e-6);
            }
            for j in 0..s.joint_count() {
                assert!(m2.rotations[f][j].frobenius_distance(&motion.rotations[f][j]) < 1e-6);
            }
        }
    }

    #[test]
    fn zxy_extraction_inverts_composition() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let rot = random_rotation(&mut r);
            let [z, x, y] = matrix_to_zxy(&rot);
            let back = rot_z(z).compose(&rot_x(x)).compose(&rot_y(y));
            assert!(back.frobenius_distance(&rot) < 1e-9);
        }
    }
}
