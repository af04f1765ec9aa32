use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::skeleton::{Skeleton, NUM_BONES};
use crate::rng;

pub const NUM_BETAS: usize = 10;
pub const MIN_BONE_SCALE: f64 = 0.5;
pub const MAX_BONE_SCALE: f64 = 2.0;
const SHAPE_MAP_STD: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BodyShape {
    pub beta: [f64; NUM_BETAS],
}

/// Fixed linear map from shape coefficients to bone-length multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeMap {
    /// Row-major `NUM_BONES x NUM_BETAS`.
    w: Vec<f64>,
}

impl ShapeMap {
    pub fn from_skeleton(skel: &Skeleton) -> Self {
        let mut r = rng::stream(skel.shape_seed, "shape-map", 0, 0);
        let w = (0..NUM_BONES * NUM_BETAS)
            .map(|_| SHAPE_MAP_STD * r.sample::<f64, _>(StandardNormal))
            .collect();
        Self { w }
    }

    /// `clamp(1 + W beta, 0.5, 2.0)` per bone.
    pub fn bone_scales(&self, shape: &BodyShape) -> [f64; NUM_BONES] {
        let mut out = [1.0; NUM_BONES];
        for (b, o) in out.iter_mut().enumerate() {
            let row = &self.w[b * NUM_BETAS..(b + 1) * NUM_BETAS];
            let lin: f64 = row.iter().zip(&shape.beta).map(|(w, x)| w * x).sum();
            *o = (1.0 + lin).clamp(MIN_BONE_SCALE, MAX_BONE_SCALE);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_shape_is_unit_scale() {
        let m = ShapeMap::from_skeleton(&Skeleton::default());
        assert!(m.bone_scales(&BodyShape::default()).iter().all(|&s| s == 1.0));
    }

    #[test]
    fn extreme_shapes_are_clamped() {
        let m = ShapeMap::from_skeleton(&Skeleton::default());
        for sign in [-1.0, 1.0] {
            let s = BodyShape {
                beta: [sign * 1e4; NUM_BETAS],
            };
            for v in m.bone_scales(&s) {
                assert!((MIN_BONE_SCALE..=MAX_BONE_SCALE).contains(&v));
            }
        }
    }
}
