//! Composite training objective: five RMSE components over features, joint
//! positions, context keypoints, and first-order velocities of both, summed
//! without weights.
//!
//! Every component is built as a tape graph so gradients flow through the
//! denoiser and through forward kinematics. The value-level functions run a
//! scratch tape over the same code path.

use crate::kinematics::{fk_positions, Skeleton};
use crate::tensor::{Real, Tape, Tensor, Var, SQRT_EPS};
use crate::{CoreError, Result};

/// Per-component loss values. `total` is the exact left-to-right sum of
/// the five components.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_g: Real,
    pub l_r: Real,
    pub l_c: Real,
    pub l_r_vel: Real,
    pub l_p_vel: Real,
    pub total: Real,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [self.l_g, self.l_r, self.l_c, self.l_r_vel, self.l_p_vel, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Mean of several breakdowns, component-wise.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as Real;
        let mut out = LossBreakdown::default();
        for b in items {
            out.l_g += b.l_g;
            out.l_r += b.l_r;
            out.l_c += b.l_c;
            out.l_r_vel += b.l_r_vel;
            out.l_p_vel += b.l_p_vel;
            out.total += b.total;
        }
        out.l_g /= n;
        out.l_r /= n;
        out.l_c /= n;
        out.l_r_vel /= n;
        out.l_p_vel /= n;
        out.total /= n;
        out
    }
}

/// Optional per-component weights; Eq-style unweighted summation is the
/// all-ones default.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub model: Real,
    pub reconstruction: Real,
    pub context: Real,
    pub rotation_velocity: Real,
    pub position_velocity: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            model: 1.0,
            reconstruction: 1.0,
            context: 1.0,
            rotation_velocity: 1.0,
            position_velocity: 1.0,
        }
    }
}

/// Tape handles for the five components and their sum.
#[derive(Clone, Copy, Debug)]
pub struct LossGraph {
    pub l_g: Var,
    pub l_r: Var,
    pub l_c: Var,
    pub l_r_vel: Var,
    pub l_p_vel: Var,
    pub total: Var,
}

impl LossGraph {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            l_g: tape.value(self.l_g).item().expect("scalar"),
            l_r: tape.value(self.l_r).item().expect("scalar"),
            l_c: tape.value(self.l_c).item().expect("scalar"),
            l_r_vel: tape.value(self.l_r_vel).item().expect("scalar"),
            l_p_vel: tape.value(self.l_p_vel).item().expect("scalar"),
            total: tape.value(self.total).item().expect("scalar"),
        }
    }
}

/// RMSE with an epsilon inside the square root so the gradient stays finite
/// at zero loss.
fn rmse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    let m = tape.mean_all(sq);
    let me = tape.add_scalar(m, SQRT_EPS);
    Ok(tape.sqrt(me))
}

/// First-order frame differences: row i+1 minus row i.
fn frame_diff(tape: &mut Tape, x: Var, op: &'static str) -> Result<Var> {
    let rows = tape.value(x).rows();
    if rows < 2 {
        return Err(CoreError::Dimension {
            op,
            detail: format!("need at least 2 frames, got {rows}"),
        });
    }
    let next = tape.slice_rows(x, 1..rows)?;
    let prev = tape.slice_rows(x, 0..rows - 1)?;
    tape.sub(next, prev)
}

/// Forward kinematics of a feature tensor evaluated off any caller tape.
pub fn fk_values(features: &Tensor, skeleton: &Skeleton) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(features);
    let out = fk_positions(&mut tape, v, skeleton)?;
    Ok(tape.value(out).clone())
}

/// Build all five components and their weighted sum on the tape.
/// `x0_hat` is the (differentiable) prediction; `x0` the clean reference.
pub fn total_loss_graph(
    tape: &mut Tape,
    x0_hat: Var,
    x0: &Tensor,
    context_indices: &[usize],
    skeleton: &Skeleton,
    weights: &LossWeights,
) -> Result<LossGraph> {
    let shape = tape.value(x0_hat).shape().to_vec();
    if shape != x0.shape() {
        return Err(CoreError::Dimension {
            op: "total_loss",
            detail: format!("prediction shape {:?} vs reference {:?}", shape, x0.shape()),
        });
    }
    if context_indices.is_empty() {
        return Err(CoreError::MotionData("context loss needs a nonempty index set".into()));
    }
    let frames = x0.rows();
    if let Some(&bad) = context_indices.iter().find(|&&i| i >= frames) {
        return Err(CoreError::MotionData(format!(
            "context index {bad} out of range for {frames} frames"
        )));
    }

    let x0_ref = tape.constant(x0);
    let l_g = rmse(tape, x0_hat, x0_ref)?;

    let fk_hat = fk_positions(tape, x0_hat, skeleton)?;
    let fk_ref_values = fk_values(x0, skeleton)?;
    let fk_ref = tape.constant(&fk_ref_values);
    let l_r = rmse(tape, fk_hat, fk_ref)?;

    let ctx_hat = tape.select_rows(fk_hat, context_indices)?;
    let ctx_ref = tape.select_rows(fk_ref, context_indices)?;
    let l_c = rmse(tape, ctx_hat, ctx_ref)?;

    let dv_hat = frame_diff(tape, x0_hat, "rotation_velocity_loss")?;
    let dv_ref = frame_diff(tape, x0_ref, "rotation_velocity_loss")?;
    let l_r_vel = rmse(tape, dv_hat, dv_ref)?;

    let dp_hat = frame_diff(tape, fk_hat, "position_velocity_loss")?;
    let dp_ref = frame_diff(tape, fk_ref, "position_velocity_loss")?;
    let l_p_vel = rmse(tape, dp_hat, dp_ref)?;

    let weighted = |tape: &mut Tape, v: Var, w: Real| {
        if w == 1.0 {
            v
        } else {
            tape.mul_scalar(v, w)
        }
    };
    let mut total = weighted(tape, l_g, weights.model);
    for (v, w) in [
        (l_r, weights.reconstruction),
        (l_c, weights.context),
        (l_r_vel, weights.rotation_velocity),
        (l_p_vel, weights.position_velocity),
    ] {
        let term = weighted(tape, v, w);
        total = tape.add(total, term)?;
    }
    Ok(LossGraph { l_g, l_r, l_c, l_r_vel, l_p_vel, total })
}

fn scalar_of(build: impl FnOnce(&mut Tape, Var) -> Result<Var>, x0_hat: &Tensor) -> Result<Real> {
    let mut tape = Tape::new();
    let v = tape.constant(x0_hat);
    let out = build(&mut tape, v)?;
    tape.value(out).item()
}

/// RMSE between prediction and reference over all entries.
pub fn model_loss(x0_hat: &Tensor, x0: &Tensor) -> Result<Real> {
    if x0_hat.shape() != x0.shape() {
        return Err(CoreError::Dimension {
            op: "model_loss",
            detail: format!("{:?} vs {:?}", x0_hat.shape(), x0.shape()),
        });
    }
    scalar_of(
        |tape, v| {
            let r = tape.constant(x0);
            rmse(tape, v, r)
        },
        x0_hat,
    )
}

/// RMSE between reconstructed joint positions of prediction and reference.
pub fn reconstruction_loss(x0_hat: &Tensor, x0: &Tensor, skeleton: &Skeleton) -> Result<Real> {
    check_decodable(x0, skeleton)?;
    scalar_of(
        |tape, v| {
            let fk_hat = fk_positions(tape, v, skeleton)?;
            let fk_ref_values = fk_values(x0, skeleton)?;
            let fk_ref = tape.constant(&fk_ref_values);
            rmse(tape, fk_hat, fk_ref)
        },
        x0_hat,
    )
}

/// Reconstruction loss restricted to the context frames.
pub fn context_loss(
    x0_hat: &Tensor,
    x0: &Tensor,
    context_indices: &[usize],
    skeleton: &Skeleton,
) -> Result<Real> {
    if context_indices.is_empty() {
        return Err(CoreError::MotionData("context loss needs a nonempty index set".into()));
    }
    check_decodable(x0, skeleton)?;
    scalar_of(
        |tape, v| {
            let fk_hat = fk_positions(tape, v, skeleton)?;
            let fk_ref_values = fk_values(x0, skeleton)?;
            let fk_ref = tape.constant(&fk_ref_values);
            let sel_hat = tape.select_rows(fk_hat, context_indices)?;
            let sel_ref = tape.select_rows(fk_ref, context_indices)?;
            rmse(tape, sel_hat, sel_ref)
        },
        x0_hat,
    )
}

/// RMSE between first-order frame differences of the features.
pub fn rotation_velocity_loss(x0_hat: &Tensor, x0: &Tensor) -> Result<Real> {
    scalar_of(
        |tape, v| {
            let r = tape.constant(x0);
            let dh = frame_diff(tape, v, "rotation_velocity_loss")?;
            let dr = frame_diff(tape, r, "rotation_velocity_loss")?;
            rmse(tape, dh, dr)
        },
        x0_hat,
    )
}

/// RMSE between first-order frame differences of the joint positions.
pub fn position_velocity_loss(x0_hat: &Tensor, x0: &Tensor, skeleton: &Skeleton) -> Result<Real> {
    check_decodable(x0, skeleton)?;
    scalar_of(
        |tape, v| {
            let fk_hat = fk_positions(tape, v, skeleton)?;
            let fk_ref_values = fk_values(x0, skeleton)?;
            let fk_ref = tape.constant(&fk_ref_values);
            let dh = frame_diff(tape, fk_hat, "position_velocity_loss")?;
            let dr = frame_diff(tape, fk_ref, "position_velocity_loss")?;
            rmse(tape, dh, dr)
        },
        x0_hat,
    )
}

/// Unweighted sum of the five components.
pub fn total_loss(
    x0_hat: &Tensor,
    x0: &Tensor,
    context_indices: &[usize],
    skeleton: &Skeleton,
) -> Result<LossBreakdown> {
    check_decodable(x0, skeleton)?;
    let mut tape = Tape::new();
    let v = tape.constant(x0_hat);
    let graph = total_loss_graph(&mut tape, v, x0, context_indices, skeleton, &LossWeights::default())?;
    Ok(graph.breakdown(&tape))
}

/// The clean reference must decode: every 6D group recoverable to a
/// rotation. Predictions are handled smoothly and are not checked.
fn check_decodable(x0: &Tensor, skeleton: &Skeleton) -> Result<()> {
    let j = skeleton.joint_count();
    if x0.shape().len() != 2 || x0.cols() != 3 + 6 * j {
        return Err(CoreError::Dimension {
            op: "loss",
            detail: format!("reference shape {:?} for {j} joints", x0.shape()),
        });
    }
    for i in 0..x0.rows() {
        let row = x0.row(i);
        for joint in 0..j {
            let g = &row[3 + 6 * joint..3 + 6 * joint + 6];
            crate::rotation::sixd_to_matrix(&crate::rotation::SixD([
                g[0], g[1], g[2], g[3], g[4], g[5],
            ]))
            .map_err(|e| CoreError::MotionData(format!("frame {i} joint {joint}: {e}")))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{synthetic_motion, test_skeleton};
    use crate::tensor::check::{finite_difference_grad, rel_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    const ZERO_FLOOR: Real = 2e-6; // sqrt(SQRT_EPS)

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn reference(frames: usize, seed: u64) -> (Tensor, Arc<Skeleton>) {
        let skeleton = Arc::new(test_skeleton());
        let seq = synthetic_motion(skeleton.clone(), frames, 15.0, seed);
        (seq.to_tensor(), skeleton)
    }

    fn offset_all(t: &Tensor, d: Real) -> Tensor {
        t.map(|v| v + d)
    }

    fn perturb(t: &Tensor, r: &mut ChaCha8Rng, amp: Real) -> Tensor {
        let data = t.data().iter().map(|v| v + r.gen_range(-amp..amp)).collect();
        t.with_data(data).unwrap()
    }

    #[test]
    fn model_loss_zero_on_identical_inputs() {
        let (x0, _) = reference(6, 1);
        assert!(model_loss(&x0, &x0).unwrap() <= ZERO_FLOOR);
    }

    #[test]
    fn model_loss_of_constant_offset_is_the_offset() {
        let (x0, _) = reference(6, 2);
        let shifted = offset_all(&x0, 0.37);
        let l = model_loss(&shifted, &x0).unwrap();
        assert!((l - 0.37).abs() < 1e-9);
    }

    #[test]
    fn model_loss_matches_flat_loop_oracle() {
        let (x0, _) = reference(5, 3);
        let mut r = rng(4);
        let noisy = perturb(&x0, &mut r, 1.0);
        // independent scalar-loop RMSE
        let mut acc = 0.0;
        for (a, b) in noisy.data().iter().zip(x0.data()) {
            acc += (a - b) * (a - b);
        }
        let oracle = (acc / x0.numel() as Real).sqrt();
        let l = model_loss(&noisy, &x0).unwrap();
        assert!((l - oracle).abs() < 1e-12);
    }

    #[test]
    fn model_loss_shape_mismatch() {
        let (x0, _) = reference(5, 5);
        let (other, _) = reference(6, 5);
        assert!(model_loss(&other, &x0).is_err());
    }

    #[test]
    fn reconstruction_loss_zero_on_identical_inputs() {
        let (x0, s) = reference(4, 6);
        assert!(reconstruction_loss(&x0, &x0, &s).unwrap() <= ZERO_FLOOR);
    }

    #[test]
    fn reconstruction_loss_sees_root_translation_directly() {
        // equal rotations, root offset by d on every coordinate: every FK
        // entry moves by d, so the RMSE is |d|
        let (x0, s) = reference(4, 7);
        let mut data = x0.data().to_vec();
        let f = x0.cols();
        for frame in 0..x0.rows() {
            for c in 0..3 {
                data[frame * f + c] += 0.21;
            }
        }
        let shifted = x0.with_data(data).unwrap();
        let l = reconstruction_loss(&shifted, &x0, &s).unwrap();
        assert!((l - 0.21).abs() < 1e-9);
    }

    #[test]
    fn reconstruction_loss_matches_recursive_fk_oracle() {
        // independent oracle: per-frame recursive FK + scalar RMSE loop
        let (x0, s) = reference(4, 8);
        let mut r = rng(9);
        let noisy = perturb(&x0, &mut r, 0.2);

        let oracle = {
            let fk = |t: &Tensor, frame: usize| -> Vec<[Real; 3]> {
                let row = t.row(frame);
                let j = s.joint_count();
                let mut global = vec![crate::rotation::RotationMatrix::identity(); j];
                let mut pos = vec![[0.0 as Real; 3]; j];
                for i in 0..j {
                    let g = &row[3 + 6 * i..3 + 6 * i + 6];
                    let local = crate::rotation::sixd_to_matrix(&crate::rotation::SixD([
                        g[0], g[1], g[2], g[3], g[4], g[5],
                    ]))
                    .unwrap();
                    match s.parent(i) {
                        None => {
                            global[i] = local;
                            let o = s.rest_offset(i);
                            pos[i] = [o[0] + row[0], o[1] + row[1], o[2] + row[2]];
                        }
                        Some(p) => {
                            let off = s.parent_offset(i);
                            let step = global[p].apply(off);
                            pos[i] = [
                                pos[p][0] + step[0],
                                pos[p][1] + step[1],
                                pos[p][2] + step[2],
                            ];
                            global[i] = global[p].compose(&local);
                        }
                    }
                }
                pos
            };
            let mut acc = 0.0;
            let mut n = 0usize;
            for frame in 0..x0.rows() {
                let a = fk(&noisy, frame);
                let b = fk(&x0, frame);
                for (pa, pb) in a.iter().zip(&b) {
                    for c in 0..3 {
                        acc += (pa[c] - pb[c]) * (pa[c] - pb[c]);
                        n += 1;
                    }
                }
            }
            (acc / n as Real).sqrt()
        };

        let l = reconstruction_loss(&noisy, &x0, &s).unwrap();
        assert!((l - oracle).abs() < 1e-9, "{l} vs oracle {oracle}");
    }

    #[test]
    fn context_loss_over_all_frames_equals_reconstruction() {
        let (x0, s) = reference(5, 10);
        let mut r = rng(11);
        let noisy = perturb(&x0, &mut r, 0.2);
        let all: Vec<usize> = (0..x0.rows()).collect();
        let lc = context_loss(&noisy, &x0, &all, &s).unwrap();
        let lr = reconstruction_loss(&noisy, &x0, &s).unwrap();
        assert_eq!(lc, lr);
    }

    #[test]
    fn context_loss_ignores_differences_outside_context() {
        let (x0, s) = reference(5, 12);
        let f = x0.cols();
        let mut data = x0.data().to_vec();
        // perturb root position of every frame except frame 2
        for frame in [0usize, 1, 3, 4] {
            data[frame * f] += 0.9;
        }
        let noisy = x0.with_data(data).unwrap();
        let l = context_loss(&noisy, &x0, &[2], &s).unwrap();
        assert!(l <= ZERO_FLOOR);
    }

    #[test]
    fn context_loss_single_frame_matches_hand_rmse() {
        let (x0, s) = reference(5, 13);
        let f = x0.cols();
        let mut data = x0.data().to_vec();
        // move frame 3's root by (0.3, 0, 0.4): per-joint displacement norm
        // is 0.5, squared 0.25 on each of J joints, mean over 3J entries
        data[3 * f] += 0.3;
        data[3 * f + 2] += 0.4;
        let noisy = x0.with_data(data).unwrap();
        let l = context_loss(&noisy, &x0, &[3], &s).unwrap();
        let expected = ((0.3 as Real).powi(2) + (0.4 as Real).powi(2)) / 3.0;
        assert!((l - expected.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn context_loss_rejects_empty_indices() {
        let (x0, s) = reference(5, 14);
        assert!(context_loss(&x0, &x0, &[], &s).is_err());
    }

    #[test]
    fn rotation_velocity_zero_for_identical_and_constant_offsets() {
        let (x0, _) = reference(6, 15);
        assert!(rotation_velocity_loss(&x0, &x0).unwrap() <= ZERO_FLOOR);
        // constant offsets vanish under differencing
        let shifted = offset_all(&x0, 1.7);
        assert!(rotation_velocity_loss(&shifted, &x0).unwrap() <= ZERO_FLOOR);
    }

    #[test]
    fn rotation_velocity_of_linear_ramp_is_the_slope() {
        let (x0, _) = reference(6, 16);
        let f = x0.cols();
        let s = 0.13;
        let mut data = x0.data().to_vec();
        for frame in 0..x0.rows() {
            for c in 0..f {
                data[frame * f + c] += s * frame as Real;
            }
        }
        let ramped = x0.with_data(data).unwrap();
        let l = rotation_velocity_loss(&ramped, &x0).unwrap();
        assert!((l - s).abs() < 1e-9);
    }

    #[test]
    fn velocity_losses_need_two_frames() {
        let (x0, s) = reference(1, 17);
        assert!(rotation_velocity_loss(&x0, &x0).is_err());
        assert!(position_velocity_loss(&x0, &x0, &s).is_err());
    }

    #[test]
    fn position_velocity_zero_cases_and_oracle() {
        let (x0, s) = reference(5, 18);
        assert!(position_velocity_loss(&x0, &x0, &s).unwrap() <= ZERO_FLOOR);

        // constant root offset: FK positions all move together, velocity
        // differences cancel
        let f = x0.cols();
        let mut data = x0.data().to_vec();
        for frame in 0..x0.rows() {
            data[frame * f] += 0.5;
            data[frame * f + 1] -= 0.25;
        }
        let shifted = x0.with_data(data).unwrap();
        assert!(position_velocity_loss(&shifted, &x0, &s).unwrap() <= ZERO_FLOOR);

        // composed oracle: FK (via the already-verified fk_values) then a
        // scalar differencing loop
        let mut r = rng(19);
        let noisy = perturb(&x0, &mut r, 0.2);
        let fk_a = fk_values(&noisy, &s).unwrap();
        let fk_b = fk_values(&x0, &s).unwrap();
        let w = fk_a.cols();
        let mut acc = 0.0;
        let mut n = 0;
        for frame in 0..fk_a.rows() - 1 {
            for c in 0..w {
                let da = fk_a.at(frame + 1, c) - fk_a.at(frame, c);
                let db = fk_b.at(frame + 1, c) - fk_b.at(frame, c);
                acc += (da - db) * (da - db);
                n += 1;
            }
        }
        let oracle = (acc / n as Real).sqrt();
        let l = position_velocity_loss(&noisy, &x0, &s).unwrap();
        assert!((l - oracle).abs() < 1e-9);
    }

    #[test]
    fn total_is_exactly_the_sum_of_components() {
        let (x0, s) = reference(6, 20);
        let mut r = rng(21);
        let noisy = perturb(&x0, &mut r, 0.3);
        let b = total_loss(&noisy, &x0, &[1, 4], &s).unwrap();
        let sum = (((b.l_g + b.l_r) + b.l_c) + b.l_r_vel) + b.l_p_vel;
        assert_eq!(b.total, sum, "total must be the exact left-to-right sum");
        assert!(b.l_g >= 0.0 && b.l_r >= 0.0 && b.l_c >= 0.0);
        assert!(b.l_r_vel >= 0.0 && b.l_p_vel >= 0.0);
    }

    #[test]
    fn total_loss_zero_breakdown_on_identical_inputs() {
        let (x0, s) = reference(6, 22);
        let b = total_loss(&x0, &x0, &[0, 3], &s).unwrap();
        for v in [b.l_g, b.l_r, b.l_c, b.l_r_vel, b.l_p_vel] {
            assert!(v <= ZERO_FLOOR);
        }
    }

    #[test]
    fn components_are_symmetric_in_their_arguments() {
        let (x0, s) = reference(5, 23);
        let mut r = rng(24);
        let other = perturb(&x0, &mut r, 0.2);
        assert_eq!(model_loss(&x0, &other).unwrap(), model_loss(&other, &x0).unwrap());
        assert!(
            (rotation_velocity_loss(&x0, &other).unwrap()
                - rotation_velocity_loss(&other, &x0).unwrap())
            .abs()
                < 1e-15
        );
        // position-based components need both sides decodable
        let lr_ab = {
            let mut tape = Tape::new();
            let v = tape.constant(&other);
            let fk_hat = fk_positions(&mut tape, v, &s).unwrap();
            let refv = tape.constant(&fk_values(&x0, &s).unwrap());
            let l = rmse(&mut tape, fk_hat, refv).unwrap();
            tape.value(l).item().unwrap()
        };
        let lr_ba = {
            let mut tape = Tape::new();
            let v = tape.constant(&x0);
            let fk_hat = fk_positions(&mut tape, v, &s).unwrap();
            let refv = tape.constant(&fk_values(&other, &s).unwrap());
            let l = rmse(&mut tape, fk_hat, refv).unwrap();
            tape.value(l).item().unwrap()
        };
        assert!((lr_ab - lr_ba).abs() < 1e-12);
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        // 3-frame, 2-joint toy, full composite objective
        let skeleton = Arc::new(
            Skeleton::new(
                vec![-1, 0],
                vec![[0.0, 0.6, 0.0], [0.0, 1.0, 0.0]],
                vec!["root".into(), "tip".into()],
            )
            .unwrap(),
        );
        let seq = synthetic_motion(skeleton.clone(), 3, 15.0, 25);
        let x0 = seq.to_tensor();
        let mut r = rng(26);
        let x: Vec<Real> = perturb(&x0, &mut r, 0.3).data().to_vec();

        let run = |vals: &[Real]| -> (Real, Vec<Real>) {
            let mut tape = Tape::new();
            let t = x0.with_data(vals.to_vec()).unwrap();
            let v = tape.param("x", &t);
            let graph = total_loss_graph(
                &mut tape,
                v,
                &x0,
                &[0, 2],
                &skeleton,
                &LossWeights::default(),
            )
            .unwrap();
            let value = tape.value(graph.total).item().unwrap();
            let grads = tape.backward(graph.total).unwrap();
            (value, grads["x"].data().to_vec())
        };
        let analytic = run(&x).1;
        let numeric = finite_difference_grad(|vals| run(vals).0, &x);
        let err = rel_error(&analytic, &numeric);
        assert!(err < 1e-5, "total loss gradient rel err {err}");
    }

    #[test]
    fn weights_hook_scales_components() {
        let (x0, s) = reference(5, 27);
        let mut r = rng(28);
        let noisy = perturb(&x0, &mut r, 0.2);
        let weights = LossWeights { model: 2.0, ..Default::default() };
        let mut tape = Tape::new();
        let v = tape.constant(&noisy);
        let g = total_loss_graph(&mut tape, v, &x0, &[1], &s, &weights).unwrap();
        let b = g.breakdown(&tape);
        let expected = 2.0 * b.l_g + b.l_r + b.l_c + b.l_r_vel + b.l_p_vel;
        assert!((b.total - expected).abs() < 1e-12);
    }
}
