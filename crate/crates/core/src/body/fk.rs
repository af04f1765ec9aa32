use autodiff::{Tape, Tensor, Var};
use nalgebra::{Matrix3, Vector3};

use super::rotation::Pose;
use super::shape::{BodyShape, ShapeMap};
use super::skeleton::{Skeleton, NUM_BONES, NUM_JOINTS};
use crate::error::Result;

pub type Joints = [Vector3<f64>; NUM_JOINTS];

/// Joint positions from local rotations: the root sits at `gamma` and each
/// child is its parent plus the parent's accumulated rotation applied to the
/// scaled rest offset.
pub fn forward_kinematics(
    skel: &Skeleton,
    rots: &[Matrix3<f64>; NUM_JOINTS],
    bone_scales: &[f64; NUM_BONES],
    gamma: Vector3<f64>,
) -> Joints {
    let mut global = [Matrix3::identity(); NUM_JOINTS];
    let mut pos = [Vector3::zeros(); NUM_JOINTS];
    global[0] = rots[0];
    pos[0] = gamma;
    for j in 1..NUM_JOINTS {
        let p = skel.parents[j].expect("non-root joint");
        let offset = Vector3::from(skel.rest_offsets[j]) * bone_scales[j - 1];
        pos[j] = pos[p] + global[p] * offset;
        global[j] = global[p] * rots[j];
    }
    pos
}

/// Convenience wrapper going from a 6D pose and shape coefficients.
pub fn pose_joints(
    skel: &Skeleton,
    map: &ShapeMap,
    pose: &Pose,
    shape: &BodyShape,
    gamma: Vector3<f64>,
) -> Result<Joints> {
    let rots = pose.matrices()?;
    Ok(forward_kinematics(skel, &rots, &map.bone_scales(shape), gamma))
}

/// Scaled rest offsets laid out as `[batch * J, 3]` rows (root row zero).
pub fn scaled_offsets(skel: &Skeleton, scales: &[[f64; NUM_BONES]]) -> Tensor {
    let mut data = Vec::with_capacity(scales.len() * NUM_JOINTS * 3);
    for s in scales {
        data.extend_from_slice(&[0.0; 3]);
        for j in 1..NUM_JOINTS {
            data.extend(skel.rest_offsets[j].iter().map(|v| v * s[j - 1]));
        }
    }
    Tensor::new(vec![scales.len() * NUM_JOINTS, 3], data).expect("consistent layout")
}

/// Batched forward kinematics on the tape.
///
/// `rots` holds `[batch * J, 9]` column-major local rotations, `offsets` the
/// matching scaled rest offsets and `root` the `[batch, 3]` root positions.
/// Joints are processed one tree depth at a time so the number of recorded
/// ops depends only on the tree depth. Returns `[batch * J, 3]`.
pub fn tape_forward_kinematics(
    tape: &mut Tape,
    skel: &Skeleton,
    rots: Var,
    offsets: Var,
    root: Var,
    batch: usize,
) -> Result<Var> {
    let levels = skel.levels();
    let mut slot = [0usize; NUM_JOINTS];
    for level in &levels {
        for (k, &j) in level.iter().enumerate() {
            slot[j] = k;
        }
    }
    let rows_of = |level: &[usize]| -> Vec<usize> {
        (0..batch).flat_map(|b| level.iter().map(move |&j| b * NUM_JOINTS + j)).collect()
    };

    let mut g_prev = tape.gather_rows(rots, &rows_of(&levels[0]))?;
    let mut p_prev = root;
    let mut positions = vec![root];
    for (l, level) in levels.iter().enumerate().skip(1) {
        let prev_len = levels[l - 1].len();
        let parent_rows: Vec<usize> = (0..batch)
            .flat_map(|b| {
                level
                    .iter()
                    .map(move |&j| b * prev_len + slot[skel.parents[j].expect("non-root joint")])
            })
            .collect();
        let rows = rows_of(level);
        let g_par = tape.gather_rows(g_prev, &parent_rows)?;
        let p_par = tape.gather_rows(p_prev, &parent_rows)?;
        let off = tape.gather_rows(offsets, &rows)?;
        let step = tape.bmv3(g_par, off)?;
        let p = tape.add(p_par, step)?;
        positions.push(p);
        if l + 1 < levels.len() {
            let r = tape.gather_rows(rots, &rows)?;
            g_prev = tape.bmm3(g_par, r)?;
        }
        p_prev = p;
    }

    // Stacked rows are ordered (level, sample, joint); restore (sample, joint).
    let mut start = vec![0usize; levels.len()];
    for l in 1..levels.len() {
        start[l] = start[l - 1] + batch * levels[l - 1].len();
    }
    let depth = skel.depths();
    let order: Vec<usize> = (0..batch)
        .flat_map(|b| {
            let (start, levels, depth) = (&start, &levels, &depth);
            (0..NUM_JOINTS).map(move |j| {
                let l = depth[j];
                start[l] + b * levels[l].len() + slot[j]
            })
        })
        .collect();
    let stacked = tape.concat_rows(&positions)?;
    Ok(tape.gather_rows(stacked, &order)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::rotation::{axis_angle, tape_rot6d_to_matrix, yaw};

    fn cumulative_offsets(skel: &Skeleton) -> Joints {
        let mut out = [Vector3::zeros(); NUM_JOINTS];
        for j in 1..NUM_JOINTS {
            out[j] = out[skel.parents[j].unwrap()] + Vector3::from(skel.rest_offsets[j]);
        }
        out
    }

    #[test]
    fn rest_pose_is_cumulative_offsets() {
        let skel = Skeleton::default();
        let map = ShapeMap::from_skeleton(&skel);
        let j = pose_joints(&skel, &map, &Pose::default(), &BodyShape::default(), Vector3::zeros()).unwrap();
        let expected = cumulative_offsets(&skel);
        for k in 0..NUM_JOINTS {
            assert!((j[k] - expected[k]).norm() < 1e-15);
        }
    }

    #[test]
    fn half_turn_mirrors_x_and_z_about_root() {
        let skel = Skeleton::default();
        let gamma = Vector3::new(0.3, 1.0, 2.0);
        let mut rots = [Matrix3::identity(); NUM_JOINTS];
        rots[0] = yaw(std::f64::consts::PI);
        let j = forward_kinematics(&skel, &rots, &[1.0; NUM_BONES], gamma);
        let rest = cumulative_offsets(&skel);
        for k in 0..NUM_JOINTS {
            let expected = gamma + Vector3::new(-rest[k].x, rest[k].y, -rest[k].z);
            assert!((j[k] - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn scaling_one_bone_moves_only_its_subtree() {
        let skel = Skeleton::default();
        let rots = [Matrix3::identity(); NUM_JOINTS];
        let base = forward_kinematics(&skel, &rots, &[1.0; NUM_BONES], Vector3::zeros());
        // bone ending at the left knee (joint 4)
        let mut scales = [1.0; NUM_BONES];
        scales[3] = 1.1;
        let moved = forward_kinematics(&skel, &rots, &scales, Vector3::zeros());
        let shift = Vector3::from(skel.rest_offsets[4]) * 0.1;
        let subtree = [4, 7, 10];
        for k in 0..NUM_JOINTS {
            let d = moved[k] - base[k];
            if subtree.contains(&k) {
                assert!((d - shift).norm() < 1e-15);
            } else {
                assert_eq!(d.norm(), 0.0);
            }
        }
    }

    #[test]
    fn tape_fk_matches_numeric() {
        let skel = Skeleton::default();
        let mut poses = Vec::new();
        let mut scales = Vec::new();
        for b in 0..3 {
            let mut rots = [Matrix3::identity(); NUM_JOINTS];
            for (j, r) in rots.iter_mut().enumerate() {
                *r = axis_angle([1.0, (j + b) as f64 * 0.3, -0.5], 0.1 * (j as f64 + 1.0) + b as f64);
            }
            poses.push(Pose::from_matrices(&rots));
            let mut s = [1.0; NUM_BONES];
            s[b * 5] = 1.2;
            scales.push(s);
        }
        let gammas = [[0.1, 0.2, 1.5], [0.0, 0.0, 0.0], [-0.4, 1.0, 2.0]];

        let mut tape = Tape::new();
        let flat: Vec<f64> = poses.iter().flat_map(|p| p.flat()).collect();
        let theta = tape.constant(Tensor::new(vec![3 * NUM_JOINTS, 6], flat).unwrap());
        let rots = tape_rot6d_to_matrix(&mut tape, theta).unwrap();
        let off = tape.constant(scaled_offsets(&skel, &scales));
        let root = tape.constant(Tensor::new(vec![3, 3], gammas.iter().flatten().copied().collect()).unwrap());
        let out = tape_forward_kinematics(&mut tape, &skel, rots, off, root, 3).unwrap();
        let got = tape.value(out).data();
        for b in 0..3 {
            let j = forward_kinematics(&skel, &poses[b].matrices().unwrap(), &scales[b], Vector3::from(gammas[b]));
            for k in 0..NUM_JOINTS {
                for c in 0..3 {
                    assert!((got[(b * NUM_JOINTS + k) * 3 + c] - j[k][c]).abs() < 1e-13);
                }
            }
        }
    }
}
