//! Training objectives on the tape, plus their combination.

use autodiff::{Tape, Tensor, Var};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::body::{tape_collision_score, tape_orthonormal_penalty, Skeleton, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::scene::CameraModel;

/// Depth floor applied before the perspective division in the 2D loss.
pub const MIN_PROJECTION_DEPTH: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub simple: f64,
    pub three_d: f64,
    pub two_d: f64,
    pub beta: f64,
    pub coll: f64,
    pub orth: f64,
    /// Epochs at the start of training during which the collision term is off.
    pub coll_warmup_epochs: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            simple: 0.001,
            three_d: 0.05,
            two_d: 0.01,
            beta: 0.0005,
            coll: 0.0002,
            orth: 0.1,
            coll_warmup_epochs: 3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.simple, self.three_d, self.two_d, self.beta, self.coll, self.orth];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Collision weight in effect during `epoch` (0-based).
    pub fn coll_at(&self, epoch: usize) -> f64 {
        if epoch < self.coll_warmup_epochs {
            0.0
        } else {
            self.coll
        }
    }
}

/// Loss terms of one batch, each unweighted.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub simple: Option<Var>,
    pub three_d: Option<Var>,
    pub two_d: Option<Var>,
    pub beta: Option<Var>,
    pub coll: Option<Var>,
    pub orth: Option<Var>,
}

/// Values of the terms and of the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    /// Squared pelvis-translation error of the heads (heads stage only).
    pub translation: f64,
    pub simple: f64,
    pub three_d: f64,
    pub two_d: f64,
    pub beta: f64,
    pub coll: f64,
    pub orth: f64,
}

/// Weighted sum of the present terms. A non-finite term is reported by name.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, weights: &LossWeights, epoch: usize) -> Result<(Var, LossReport)> {
    let mut report = LossReport::default();
    let entries: [(&'static str, Option<Var>, f64, &mut f64); 6] = [
        ("simple", terms.simple, weights.simple, &mut report.simple),
        ("3d", terms.three_d, weights.three_d, &mut report.three_d),
        ("2d", terms.two_d, weights.two_d, &mut report.two_d),
        ("beta", terms.beta, weights.beta, &mut report.beta),
        ("coll", terms.coll, weights.coll_at(epoch), &mut report.coll),
        ("orth", terms.orth, weights.orth, &mut report.orth),
    ];
    let mut total: Option<Var> = None;
    for (name, var, w, slot) in entries {
        let Some(v) = var else { continue };
        let value = tape.value(v).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { term: name });
        }
        *slot = value;
        let scaled = tape.scale(v, w)?;
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.scalar(0.0),
    };
    report.total = tape.value(total).item();
    if !report.total.is_finite() {
        return Err(Error::NonFiniteLoss { term: "total" });
    }
    Ok((total, report))
}

fn sum_sq_over(tape: &mut Tape, a: Var, b: Var, rows: usize) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    Ok(tape.scale(s, 1.0 / rows as f64)?)
}

/// Mean over joints of the squared Frobenius distance between rotation
/// matrices. Both inputs are `[R, 9]`.
pub fn loss_simple(tape: &mut Tape, pred_rots: Var, gt_rots: Var) -> Result<Var> {
    let rows = tape.value(pred_rots).rows();
    sum_sq_over(tape, pred_rots, gt_rots, rows)
}

/// Mean over joints of the squared position error. Both inputs `[R, 3]`.
pub fn loss_3d(tape: &mut Tape, pred_joints: Var, gt_joints: Var) -> Result<Var> {
    let rows = tape.value(pred_joints).rows();
    sum_sq_over(tape, pred_joints, gt_joints, rows)
}

/// Mean over samples of the squared shape-coefficient error. `[S, 10]`.
pub fn loss_beta(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let rows = tape.value(pred).rows();
    sum_sq_over(tape, pred, gt, rows)
}

/// Observation of one sample for the reprojection loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprojectionTarget {
    /// Translation added to the root-relative joints before projecting.
    pub gamma: Vector3<f64>,
    pub camera: CameraModel,
    pub keypoints: [[f64; 2]; NUM_JOINTS],
    pub visible: [bool; NUM_JOINTS],
}

/// Squared reprojection error in units of image width, summed over visible
/// joints, divided by the visible count, and averaged over samples with at
/// least one visible joint. `joints` are `[S * J, 3]` root-relative.
///
/// Returns `None` when no sample has a visible joint.
pub fn loss_2d(tape: &mut Tape, joints: Var, targets: &[ReprojectionTarget]) -> Result<Option<Var>> {
    let rows = targets.len() * NUM_JOINTS;
    let used = targets.iter().filter(|t| t.visible.iter().any(|&v| v)).count();
    if used == 0 {
        return Ok(None);
    }
    let mut gamma = Vec::with_capacity(rows * 3);
    let (mut f, mut cx, mut cy) = (Vec::with_capacity(rows), Vec::with_capacity(rows), Vec::with_capacity(rows));
    let (mut ku, mut kv, mut w) = (Vec::with_capacity(rows), Vec::with_capacity(rows), Vec::with_capacity(rows));
    for t in targets {
        let count = t.visible.iter().filter(|&&v| v).count();
        for j in 0..NUM_JOINTS {
            gamma.extend_from_slice(t.gamma.as_slice());
            f.push(t.camera.f);
            cx.push(t.camera.cx);
            cy.push(t.camera.cy);
            ku.push(t.keypoints[j][0]);
            kv.push(t.keypoints[j][1]);
            w.push(if t.visible[j] {
                1.0 / (count as f64 * t.camera.width * t.camera.width * used as f64)
            } else {
                0.0
            });
        }
    }
    let col = |tape: &mut Tape, v: Vec<f64>| -> Result<Var> { Ok(tape.constant(Tensor::new(vec![rows, 1], v)?)) };
    let g = tape.constant(Tensor::new(vec![rows, 3], gamma)?);
    let p = tape.add(joints, g)?;
    let x = tape.slice_cols(p, 0, 1)?;
    let y = tape.slice_cols(p, 1, 2)?;
    let z = tape.slice_cols(p, 2, 3)?;
    let z = tape.clamp(z, MIN_PROJECTION_DEPTH, f64::MAX)?;
    let f = col(tape, f)?;
    let w = col(tape, w)?;
    let mut parts = Vec::with_capacity(2);
    for (num, c, k) in [(x, cx, ku), (y, cy, kv)] {
        let q = tape.div(num, z)?;
        let q = tape.mul(q, f)?;
        let c = col(tape, c)?;
        let q = tape.add(q, c)?;
        let k = col(tape, k)?;
        let d = tape.sub(q, k)?;
        let sq = tape.square(d)?;
        parts.push(tape.mul(sq, w)?);
    }
    let s = tape.add(parts[0], parts[1])?;
    Ok(Some(tape.sum(s)?))
}

/// Mean collision score over the batch; bodies and clouds share a frame.
pub fn loss_collision(tape: &mut Tape, skel: &Skeleton, joints: Var, clouds: &[&[Vector3<f64>]]) -> Result<Var> {
    let c = tape_collision_score(tape, skel, joints, clouds)?;
    Ok(tape.scale(c.total, 1.0 / clouds.len() as f64)?)
}

/// Orthonormality penalty of `[S * J, 6]` rows, summed over joints and
/// averaged over samples.
pub fn loss_orth(tape: &mut Tape, rows: Var) -> Result<Var> {
    let samples = tape.value(rows).rows() / NUM_JOINTS;
    let p = tape_orthonormal_penalty(tape, rows)?;
    Ok(tape.scale(p, 1.0 / samples as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{axis_angle, matrix_to_rot6d, rot6d_to_matrix};
    use nalgebra::Matrix3;

    fn rot_rows(tape: &mut Tape, rs: &[Matrix3<f64>]) -> Var {
        let data: Vec<f64> = rs.iter().flat_map(|r| r.as_slice().to_vec()).collect();
        tape.constant(Tensor::new(vec![rs.len(), 9], data).unwrap())
    }

    #[test]
    fn simple_loss_of_quarter_turn() {
        let mut tape = Tape::new();
        let a = rot_rows(&mut tape, &[Matrix3::identity(), Matrix3::identity()]);
        let quarter = axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let b = rot_rows(&mut tape, &[quarter, Matrix3::identity()]);
        // explicit Frobenius distance, averaged over the two joints
        let fro: f64 = (quarter - Matrix3::identity()).iter().map(|x| x * x).sum();
        assert!((fro - 4.0).abs() < 1e-12);
        let l = loss_simple(&mut tape, a, b).unwrap();
        assert!((tape.value(l).item() - fro / 2.0).abs() < 1e-12);
        let l2 = loss_simple(&mut tape, b, a).unwrap();
        assert_eq!(tape.value(l).item(), tape.value(l2).item());
        let zero = loss_simple(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(zero).item(), 0.0);
    }

    fn target(width: f64) -> ReprojectionTarget {
        let camera = CameraModel {
            f: 500.0,
            cx: 320.0,
            cy: 240.0,
            width,
            height: 480.0,
        };
        let gamma = Vector3::new(0.1, -0.2, 2.0);
        let mut keypoints = [[0.0; 2]; NUM_JOINTS];
        let mut visible = [false; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            let p = gamma + Vector3::new(0.01 * j as f64, -0.02 * j as f64, 0.0);
            keypoints[j] = camera.project(&p).unwrap();
            visible[j] = j % 3 != 0;
        }
        ReprojectionTarget {
            gamma,
            camera,
            keypoints,
            visible,
        }
    }

    fn rel_joints(tape: &mut Tape, perturb: Option<(usize, f64)>) -> Var {
        let mut data = Vec::new();
        for j in 0..NUM_JOINTS {
            data.extend_from_slice(&[0.01 * j as f64, -0.02 * j as f64, 0.0]);
        }
        if let Some((j, dx)) = perturb {
            data[j * 3] += dx;
        }
        tape.constant(Tensor::new(vec![NUM_JOINTS, 3], data).unwrap())
    }

    #[test]
    fn reprojection_loss_cases() {
        let t = target(640.0);
        let mut tape = Tape::new();
        let exact = rel_joints(&mut tape, None);
        let l = loss_2d(&mut tape, exact, std::slice::from_ref(&t)).unwrap().unwrap();
        assert!(tape.value(l).item().abs() < 1e-20);
        // invisible joint moved: no change
        let hidden = rel_joints(&mut tape, Some((3, 0.5)));
        let l = loss_2d(&mut tape, hidden, std::slice::from_ref(&t)).unwrap().unwrap();
        assert!(tape.value(l).item().abs() < 1e-20);
        // visible joint moved by exactly 10 px along u (depth 2 m, f 500)
        let shifted = rel_joints(&mut tape, Some((4, 10.0 * 2.0 / 500.0)));
        let l = loss_2d(&mut tape, shifted, std::slice::from_ref(&t)).unwrap().unwrap();
        let count = t.visible.iter().filter(|&&v| v).count() as f64;
        let want = (10.0f64 / 640.0).powi(2) / count;
        assert!((tape.value(l).item() - want).abs() < 1e-15);
        let mut none = t.clone();
        none.visible = [false; NUM_JOINTS];
        assert!(loss_2d(&mut tape, exact, &[none]).unwrap().is_none());
    }

    #[test]
    fn weighted_total_and_single_terms() {
        let mut tape = Tape::new();
        let a = tape.scalar(2.0);
        let b = tape.scalar(3.0);
        let w = LossWeights::default();
        let terms = LossTerms {
            simple: Some(a),
            coll: Some(b),
            ..Default::default()
        };
        let (t, r) = total_loss(&mut tape, &terms, &w, 0).unwrap();
        assert!((tape.value(t).item() - 2.0 * w.simple).abs() < 1e-18);
        assert_eq!(r.coll, 3.0);
        let (t, _) = total_loss(&mut tape, &terms, &w, 3).unwrap();
        assert!((tape.value(t).item() - (2.0 * w.simple + 3.0 * w.coll)).abs() < 1e-15);
        let (t, r) = total_loss(&mut tape, &LossTerms::default(), &w, 0).unwrap();
        assert_eq!(tape.value(t).item(), 0.0);
        assert_eq!(r, LossReport::default());
        let nan = tape.scalar(f64::NAN);
        let err = total_loss(
            &mut tape,
            &LossTerms {
                orth: Some(nan),
                ..Default::default()
            },
            &w,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { term: "orth" }));
    }

    #[test]
    fn orth_loss_vanishes_on_rotations() {
        let rows: Vec<f64> = (0..2 * NUM_JOINTS)
            .flat_map(|j| matrix_to_rot6d(&axis_angle([1.0, 0.2, j as f64], 0.1 * j as f64)))
            .collect();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![2 * NUM_JOINTS, 6], rows.clone()).unwrap());
        let l = loss_orth(&mut tape, v).unwrap();
        assert!(tape.value(l).item() < 1e-24);
        assert!(rot6d_to_matrix(&rows[..6].try_into().unwrap()).is_ok());
    }
}
