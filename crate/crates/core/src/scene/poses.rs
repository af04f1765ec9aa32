//! Seeded library of parametric stand / sit / lean poses consistent with the
//! scene templates.
//!
//! A single style value in `[0, 1]` drives both the arms and the legs, so the
//! visible upper body carries information about the often-truncated legs.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::{SceneLayout, SceneTemplate};
use crate::body::{axis_angle, forward_kinematics, yaw, BodyShape, Joints, Pose, ShapeMap, Skeleton, NUM_BETAS, NUM_BONES, NUM_JOINTS};

const JOINT_NOISE: f64 = 0.08;
/// Gap left between the body surface and the surface it rests on.
const REST_GAP: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Stand,
    Sit,
    Lean,
}

impl Action {
    pub fn for_template(t: SceneTemplate) -> Action {
        match t {
            SceneTemplate::Floor => Action::Stand,
            SceneTemplate::FloorSeat => Action::Sit,
            SceneTemplate::FloorBoxWall => Action::Lean,
        }
    }
}

/// A posed body placed in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedBody {
    pub action: Action,
    pub pose: Pose,
    pub shape: BodyShape,
    /// Pelvis position in world coordinates.
    pub pelvis: Vector3<f64>,
    pub style: f64,
}

fn rx(a: f64) -> Matrix3<f64> {
    axis_angle([1.0, 0.0, 0.0], a)
}

fn rz(a: f64) -> Matrix3<f64> {
    axis_angle([0.0, 0.0, 1.0], a)
}

/// Lowest point of any capsule surface selected by `bones`.
fn lowest_surface(skel: &Skeleton, joints: &Joints, bones: impl Iterator<Item = usize>) -> f64 {
    bones
        .map(|b| {
            let c = b + 1;
            let p = skel.parents[c].expect("non-root joint");
            joints[c].y.min(joints[p].y) - skel.radii[b]
        })
        .fold(f64::INFINITY, f64::min)
}

fn all_bones() -> std::ops::Range<usize> {
    0..NUM_BONES
}

/// Bones below the knees: shins (ending at 7, 8) and feet (10, 11).
fn lower_leg_bones() -> impl Iterator<Item = usize> + Clone {
    [6usize, 7, 9, 10].into_iter()
}

struct Builder<'a> {
    skel: &'a Skeleton,
    scales: [f64; NUM_BONES],
    rots: [Matrix3<f64>; NUM_JOINTS],
}

impl Builder<'_> {
    fn joints(&self) -> Joints {
        forward_kinematics(self.skel, &self.rots, &self.scales, Vector3::zeros())
    }

    fn arms(&mut self, s: f64) {
        let lift = 1.3 - 0.8 * s;
        let bend = 0.2 + 1.2 * s;
        self.rots[16] = rz(-lift);
        self.rots[17] = rz(lift);
        self.rots[18] = axis_angle([0.0, 1.0, 0.0], -bend);
        self.rots[19] = axis_angle([0.0, 1.0, 0.0], bend);
    }

    /// Hip flexion `hip` (forward positive), knee flexion `knee`, and the ankle
    /// rotated to keep the foot level.
    fn leg(&mut self, side: usize, hip: f64, knee: f64, spread: f64) {
        let (h, k, a) = [(1, 4, 7), (2, 5, 8)][side];
        let sign = if side == 0 { 1.0 } else { -1.0 };
        self.rots[h] = rz(sign * spread) * rx(-hip);
        self.rots[k] = rx(knee);
        self.rots[a] = rx(hip - knee);
    }

    fn jitter(&mut self, r: &mut ChaCha8Rng) {
        let n = Normal::new(0.0, JOINT_NOISE).expect("valid std");
        for j in 1..NUM_JOINTS {
            let v = Vector3::new(n.sample(r), n.sample(r), n.sample(r));
            let angle = v.norm();
            if angle > 0.0 {
                self.rots[j] *= axis_angle([v.x, v.y, v.z], angle);
            }
        }
    }
}

/// Samples a shape, a pose matching the scene template and its placement.
pub fn sample_body(skel: &Skeleton, map: &ShapeMap, layout: &SceneLayout, r: &mut ChaCha8Rng) -> PlacedBody {
    let mut shape = BodyShape::default();
    let n01 = Normal::new(0.0f64, 1.0).expect("valid std");
    for b in shape.beta.iter_mut().take(NUM_BETAS) {
        *b = n01.sample(r).clamp(-2.0, 2.0);
    }
    let style: f64 = r.random();
    let action = Action::for_template(layout.template);
    let mut bld = Builder {
        skel,
        scales: map.bone_scales(&shape),
        rots: [Matrix3::identity(); NUM_JOINTS],
    };
    bld.arms(style);

    let pelvis = match action {
        Action::Stand => {
            let step = 0.35 * style;
            bld.leg(0, step, 0.3 * style + 0.5 * step, 0.08 * style);
            bld.leg(1, -0.1 * style, 0.3 * style, 0.08 * style);
            bld.jitter(r);
            bld.rots[0] = yaw(PI + r.random_range(-0.7..0.7));
            let low = lowest_surface(skel, &bld.joints(), all_bones());
            Vector3::new(r.random_range(-0.3..0.3), REST_GAP - low, r.random_range(-0.3..0.3))
        }
        Action::Sit => {
            let seat = layout.seat.expect("sit needs a seat");
            bld.rots[3] = rx(0.15 * style);
            for side in 0..2 {
                bld.leg(side, FRAC_PI_2, FRAC_PI_2, 0.05 + 0.15 * style);
            }
            bld.jitter(r);
            bld.rots[0] = yaw(PI + r.random_range(-0.25..0.25));
            // Thighs rest on the seat: the lowest pelvis/thigh surface sits on top.
            let seat_bones = [0usize, 1, 3, 4];
            let low = lowest_surface(skel, &bld.joints(), seat_bones.into_iter());
            let pelvis_y = seat.max[1] + REST_GAP - low;
            // Feet below the floor: swing the shins forward until they clear.
            // Feet dangling: point the toes down until they touch.
            let base = [bld.rots[4], bld.rots[5], bld.rots[7], bld.rots[8]];
            let feet = |bld: &mut Builder, shin: f64, toe: f64| {
                bld.rots[4] = base[0] * rx(-shin);
                bld.rots[5] = base[1] * rx(-shin);
                bld.rots[7] = base[2] * rx(toe);
                bld.rots[8] = base[3] * rx(toe);
                pelvis_y + lowest_surface(skel, &bld.joints(), lower_leg_bones()) - REST_GAP
            };
            let gap0 = feet(&mut bld, 0.0, 0.0);
            let solve = |bld: &mut Builder, f: &dyn Fn(&mut Builder, f64) -> f64, hi: f64| {
                let (mut lo, mut hi) = (0.0, hi);
                let lowering = f(bld, 0.0) > 0.0;
                if (f(bld, hi) > 0.0) == lowering {
                    return hi;
                }
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if (f(bld, mid) > 0.0) == lowering {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            };
            if gap0 < 0.0 {
                let a = solve(&mut bld, &|b, a| feet(b, a, 0.0), 1.3);
                feet(&mut bld, a, 0.0);
            } else if gap0 > 0.0 {
                let a = solve(&mut bld, &|b, a| feet(b, 0.0, a), 1.2);
                feet(&mut bld, 0.0, a);
            }
            // Shins stay in front of the seat; the pelvis stays over it.
            let joints = bld.joints();
            let shins = lower_leg_bones()
                .map(|b| {
                    let c = b + 1;
                    let p = skel.parents[c].expect("non-root joint");
                    joints[c].z.max(joints[p].z) + skel.radii[b]
                })
                .fold(f64::NEG_INFINITY, f64::max);
            let z = (seat.min[2] - REST_GAP - shins - r.random_range(0.0..0.03)).min(seat.max[2] - 0.05);
            Vector3::new(r.random_range(-0.05..0.05), pelvis_y, z)
        }
        Action::Lean => {
            let wall = layout.wall_z.expect("lean needs a wall");
            bld.leg(0, 0.1 * style, 0.15 * style, 0.06);
            bld.leg(1, 0.1 * style, 0.15 * style, 0.06);
            bld.rots[15] = rx(0.1);
            bld.jitter(r);
            let tilt = 0.08 + 0.12 * style;
            bld.rots[0] = yaw(PI + r.random_range(-0.3..0.3)) * rx(-tilt);
            let joints = bld.joints();
            let low = lowest_surface(skel, &joints, all_bones());
            // The rearmost body part stays just in front of the wall.
            let back = all_bones()
                .map(|b| {
                    let c = b + 1;
                    let p = skel.parents[c].expect("non-root joint");
                    joints[c].z.max(joints[p].z) + skel.radii[b]
                })
                .fold(f64::NEG_INFINITY, f64::max);
            Vector3::new(r.random_range(-0.2..0.2), REST_GAP - low, wall - REST_GAP - back)
        }
    };
    PlacedBody {
        action,
        pose: Pose::from_matrices(&bld.rots),
        shape,
        pelvis,
        style,
    }
}
