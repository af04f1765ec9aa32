//! Joints-only articulated body: skeleton, 6D rotations, forward kinematics
//! and capsule occupancy.

mod capsule;
mod fk;
mod rotation;
mod shape;
mod skeleton;

pub use capsule::{
    collision_score, contact, hard_collision_ratio, occupancy, segment_distance, tape_collision_score,
    CollisionScore, TapeCollision,
};
pub use fk::{forward_kinematics, pose_joints, scaled_offsets, tape_forward_kinematics, Joints};
pub use rotation::{
    axis_angle, matrix_to_rot6d, orthonormal_penalty, rot6d_to_matrix, tape_orthonormal_penalty,
    tape_rot6d_to_matrix, yaw, Pose, IDENTITY_6D,
};
pub use shape::{BodyShape, ShapeMap, MAX_BONE_SCALE, MIN_BONE_SCALE, NUM_BETAS};
pub use skeleton::{Skeleton, JOINT_NAMES, NUM_BONES, NUM_JOINTS, PARENTS};
