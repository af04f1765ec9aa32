use autodiff::{Tape, Tensor, Var};
use nalgebra::Vector3;

use super::fk::Joints;
use super::skeleton::{Skeleton, NUM_BONES, NUM_JOINTS};
use crate::error::Result;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Euclidean distance from `x` to the segment `p..q`.
pub fn segment_distance(x: &Vector3<f64>, p: &Vector3<f64>, q: &Vector3<f64>) -> f64 {
    let d = q - p;
    let w = x - p;
    let dd = d.dot(&d);
    let t = if dd > 0.0 { (w.dot(&d) / dd).clamp(0.0, 1.0) } else { 0.0 };
    (x - (p + d * t)).norm()
}

/// Soft occupancy `max_b (r_b - dist_b(q)) / tau` and the maximizing bone.
pub fn occupancy(skel: &Skeleton, joints: &Joints, q: &Vector3<f64>) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for b in 0..NUM_BONES {
        let j = b + 1;
        let p = skel.parents[j].expect("non-root joint");
        let f = (skel.radii[b] - segment_distance(q, &joints[p], &joints[j])) / skel.tau;
        if f > best.0 {
            best = (f, b);
        }
    }
    best
}

/// Axis-aligned box around all joints, grown by `margin`.
struct BodyBox {
    lo: Vector3<f64>,
    hi: Vector3<f64>,
}

impl BodyBox {
    fn new(joints: &Joints, margin: f64) -> Self {
        let mut lo = joints[0];
        let mut hi = joints[0];
        for j in joints.iter().skip(1) {
            lo = lo.inf(j);
            hi = hi.sup(j);
        }
        let m = Vector3::repeat(margin);
        Self { lo: lo - m, hi: hi + m }
    }

    fn contains(&self, q: &Vector3<f64>) -> bool {
        (0..3).all(|k| q[k] >= self.lo[k] && q[k] <= self.hi[k])
    }
}

fn max_radius(skel: &Skeleton) -> f64 {
    skel.radii.iter().copied().fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionScore {
    /// `(1/|S|) sum_q sigmoid(f(q)) [f(q) > 0]`, in `[0, 1]`.
    pub value: f64,
    /// Number of points strictly inside the body.
    pub inside: usize,
    /// Set when the point set was empty; the value is then 0.
    pub empty: bool,
}

/// Differentiable-form collision score evaluated numerically.
///
/// Points outside the body's bounding box grown by the largest radius cannot
/// be inside any capsule and are skipped.
pub fn collision_score(skel: &Skeleton, joints: &Joints, points: &[Vector3<f64>]) -> CollisionScore {
    if points.is_empty() {
        return CollisionScore {
            value: 0.0,
            inside: 0,
            empty: true,
        };
    }
    let bbox = BodyBox::new(joints, max_radius(skel));
    let mut sum = 0.0;
    let mut inside = 0;
    for q in points {
        if !bbox.contains(q) {
            continue;
        }
        let (f, _) = occupancy(skel, joints, q);
        if f > 0.0 {
            sum += sigmoid(f);
            inside += 1;
        }
    }
    CollisionScore {
        value: sum / points.len() as f64,
        inside,
        empty: false,
    }
}

/// Fraction of `denominator` taken by points strictly inside the body.
pub fn hard_collision_ratio(skel: &Skeleton, joints: &Joints, points: &[Vector3<f64>], denominator: usize) -> f64 {
    if denominator == 0 {
        return 0.0;
    }
    let bbox = BodyBox::new(joints, max_radius(skel));
    let inside = points
        .iter()
        .filter(|q| bbox.contains(q) && occupancy(skel, joints, q).0 > 0.0)
        .count();
    inside as f64 / denominator as f64
}

/// Whether any point lies within `threshold` of the capsule surface. Points
/// inside the body have negative surface distance and count as contact.
pub fn contact(skel: &Skeleton, joints: &Joints, points: &[Vector3<f64>], threshold: f64) -> bool {
    let bbox = BodyBox::new(joints, max_radius(skel) + threshold);
    points
        .iter()
        .any(|q| bbox.contains(q) && -occupancy(skel, joints, q).0 * skel.tau <= threshold)
}

/// Output of [`tape_collision_score`].
pub struct TapeCollision {
    /// Sum over the batch of per-sample scores (a `[1]` tape value).
    pub total: Var,
    /// Per-sample score values.
    pub values: Vec<f64>,
    /// Per-sample count of points inside the body.
    pub inside: Vec<usize>,
}

/// Collision score of a batch of bodies on the tape.
///
/// `joints` are `[batch * J, 3]` positions in the same frame as the points.
/// The inside indicator and the maximizing bone are decided from the current
/// values and carry no gradient; only gated points are recorded, each against
/// its maximizing bone, so the gradient flows through the sigmoid of the
/// occupancy and from there through the joint positions.
pub fn tape_collision_score(
    tape: &mut Tape,
    skel: &Skeleton,
    joints: Var,
    clouds: &[&[Vector3<f64>]],
) -> Result<TapeCollision> {
    let batch = clouds.len();
    let jv = tape.value(joints).data().to_vec();
    let mut parent_rows = Vec::new();
    let mut child_rows = Vec::new();
    let mut xs = Vec::new();
    let mut radii = Vec::new();
    let mut weights = Vec::new();
    let mut values = vec![0.0; batch];
    let mut inside = vec![0; batch];
    for (b, cloud) in clouds.iter().enumerate() {
        if cloud.is_empty() {
            continue;
        }
        let mut body = [Vector3::zeros(); NUM_JOINTS];
        for (j, v) in body.iter_mut().enumerate() {
            let o = (b * NUM_JOINTS + j) * 3;
            *v = Vector3::new(jv[o], jv[o + 1], jv[o + 2]);
        }
        let bbox = BodyBox::new(&body, max_radius(skel));
        let w = 1.0 / cloud.len() as f64;
        for q in cloud.iter() {
            if !bbox.contains(q) {
                continue;
            }
            let (f, bone) = occupancy(skel, &body, q);
            if f > 0.0 {
                let j = bone + 1;
                parent_rows.push(b * NUM_JOINTS + skel.parents[j].expect("non-root joint"));
                child_rows.push(b * NUM_JOINTS + j);
                xs.extend_from_slice(q.as_slice());
                radii.push(skel.radii[bone]);
                weights.push(w);
                values[b] += sigmoid(f);
                inside[b] += 1;
            }
        }
        values[b] *= w;
    }
    if parent_rows.is_empty() {
        let total = tape.scalar(0.0);
        return Ok(TapeCollision { total, values, inside });
    }
    let k = parent_rows.len();
    let p = tape.gather_rows(joints, &parent_rows)?;
    let q = tape.gather_rows(joints, &child_rows)?;
    let x = tape.constant(Tensor::new(vec![k, 3], xs)?);
    let d = tape.sub(q, p)?;
    let w = tape.sub(x, p)?;
    let wd = tape.mul(w, d)?;
    let num = tape.sum_last(wd)?;
    let dsq = tape.square(d)?;
    let den = tape.sum_last(dsq)?;
    let t = tape.div(num, den)?;
    let t = tape.clamp(t, 0.0, 1.0)?;
    let dt = tape.mul(d, t)?;
    let c = tape.add(p, dt)?;
    let diff = tape.sub(x, c)?;
    let sq = tape.square(diff)?;
    let dist2 = tape.sum_last(sq)?;
    let dist = tape.sqrt(dist2)?;
    let r = tape.constant(Tensor::new(vec![k, 1], radii)?);
    let gap = tape.sub(r, dist)?;
    let f = tape.scale(gap, 1.0 / skel.tau)?;
    let s = tape.sigmoid(f)?;
    let wv = tape.constant(Tensor::new(vec![k, 1], weights)?);
    let ws = tape.mul(s, wv)?;
    let total = tape.sum(ws)?;
    Ok(TapeCollision { total, values, inside })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::fk::forward_kinematics;
    use nalgebra::Matrix3;

    fn rest_joints(gamma: Vector3<f64>) -> Joints {
        let skel = Skeleton::default();
        forward_kinematics(&skel, &[Matrix3::identity(); NUM_JOINTS], &[1.0; NUM_BONES], gamma)
    }

    /// Skeleton whose capsules all have radius 0.1.
    fn uniform_skeleton() -> Skeleton {
        Skeleton {
            radii: vec![0.1; NUM_BONES],
            ..Skeleton::default()
        }
    }

    #[test]
    fn occupancy_at_bone_midpoint() {
        let skel = uniform_skeleton();
        let j = rest_joints(Vector3::zeros());
        // left thigh, joints 1 -> 4
        let mid = (j[1] + j[4]) / 2.0;
        let (f, bone) = occupancy(&skel, &j, &mid);
        assert!((f - 2.0).abs() < 1e-12);
        assert_eq!(bone, 3);
    }

    #[test]
    fn occupancy_at_radius_is_zero() {
        let skel = uniform_skeleton();
        let j = rest_joints(Vector3::zeros());
        // head capsule tip, pushed up along the bone axis by exactly r
        let axis = (j[15] - j[12]).normalize();
        let q = j[15] + axis * 0.1;
        let (f, _) = occupancy(&skel, &j, &q);
        assert!(f.abs() < 1e-12, "f = {f}");
    }

    #[test]
    fn far_point_scores_zero() {
        let skel = Skeleton::default();
        let j = rest_joints(Vector3::zeros());
        let q = Vector3::new(0.0, 3.0, 0.0);
        let (f, _) = occupancy(&skel, &j, &q);
        assert!(f < -10.0);
        assert_eq!(collision_score(&skel, &j, &[q]).value, 0.0);
    }

    #[test]
    fn single_point_at_midpoint_scores_sigmoid_two() {
        let skel = uniform_skeleton();
        let j = rest_joints(Vector3::zeros());
        let mid = (j[1] + j[4]) / 2.0;
        let s = collision_score(&skel, &j, &[mid]);
        assert!((s.value - 0.880_797_077_977_882_3).abs() < 1e-12);
        assert_eq!(s.inside, 1);
    }

    #[test]
    fn empty_cloud_is_flagged() {
        let skel = Skeleton::default();
        let s = collision_score(&skel, &rest_joints(Vector3::zeros()), &[]);
        assert!(s.empty);
        assert_eq!(s.value, 0.0);
    }

    #[test]
    fn floating_body_has_no_collision_or_contact() {
        let skel = Skeleton::default();
        let j = rest_joints(Vector3::new(0.0, 3.0, 0.0));
        let floor: Vec<Vector3<f64>> = (0..400)
            .map(|i| Vector3::new((i % 20) as f64 * 0.1 - 1.0, 0.0, (i / 20) as f64 * 0.1 - 1.0))
            .collect();
        assert_eq!(collision_score(&skel, &j, &floor).value, 0.0);
        assert_eq!(hard_collision_ratio(&skel, &j, &floor, floor.len()), 0.0);
        assert!(!contact(&skel, &j, &floor, 0.02));
    }

    #[test]
    fn foot_on_floor_is_contact() {
        let skel = Skeleton::default();
        let j0 = rest_joints(Vector3::zeros());
        // lowest capsule surface point of the body, then put the floor there
        let lowest = (0..NUM_BONES)
            .map(|b| {
                let c = b + 1;
                let p = skel.parents[c].unwrap();
                j0[c].y.min(j0[p].y) - skel.radii[b]
            })
            .fold(f64::INFINITY, f64::min);
        let j = rest_joints(Vector3::new(0.0, -lowest, 0.0));
        let floor: Vec<Vector3<f64>> = (0..441)
            .map(|i| Vector3::new((i % 21) as f64 * 0.05 - 0.5, 0.0, (i / 21) as f64 * 0.05 - 0.5))
            .collect();
        assert!(contact(&skel, &j, &floor, 0.02));
        assert_eq!(hard_collision_ratio(&skel, &j, &floor, floor.len()), 0.0);
    }

    #[test]
    fn tape_score_matches_numeric() {
        let skel = Skeleton::default();
        let j = rest_joints(Vector3::zeros());
        let cloud: Vec<Vector3<f64>> = (0..2000)
            .map(|i| {
                let a = i as f64 * 0.618;
                Vector3::new(0.3 * a.sin(), -0.9 + 1.6 * ((i * 7) % 2000) as f64 / 2000.0, 0.2 * (a * 1.3).cos())
            })
            .collect();
        let numeric = collision_score(&skel, &j, &cloud);
        assert!(numeric.inside > 0);
        let mut tape = Tape::new();
        let flat: Vec<f64> = j.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        let jv = tape.param(Tensor::new(vec![NUM_JOINTS, 3], flat).unwrap());
        let out = tape_collision_score(&mut tape, &skel, jv, &[&cloud]).unwrap();
        assert!((tape.value(out.total).item() - numeric.value).abs() < 1e-14);
        assert!((out.values[0] - numeric.value).abs() < 1e-14);
        assert_eq!(out.inside[0], numeric.inside);
    }
}
