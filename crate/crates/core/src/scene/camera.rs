use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::body::{Joints, NUM_JOINTS};
use crate::error::{Error, Result};

const MIN_DEPTH: f64 = 1e-6;
pub const MIN_BOX_PX: f64 = 32.0;
const BOX_EXPANSION: f64 = 1.1;

/// Pinhole intrinsics. The camera frame is y-up, x-right, z-forward and is
/// axis-aligned with the world frame (a level camera).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.f > 0.0 && self.width > 0.0 && self.height > 0.0) {
            return Err(Error::InvalidArgument(format!("bad camera {self:?}")));
        }
        Ok(())
    }

    /// `(u, v)` for points in front of the camera, `None` otherwise.
    pub fn project(&self, p: &Vector3<f64>) -> Option<[f64; 2]> {
        if !(p.z > MIN_DEPTH) {
            return None;
        }
        Some([self.f * p.x / p.z + self.cx, self.f * p.y / p.z + self.cy])
    }

    pub fn in_bounds(&self, uv: &[f64; 2]) -> bool {
        (0.0..=self.width).contains(&uv[0]) && (0.0..=self.height).contains(&uv[1])
    }

    /// Intrinsics normalized by image width, as fed to the networks.
    pub fn normalized(&self) -> [f64; 3] {
        [self.f / self.width, self.cx / self.width, self.cy / self.width]
    }
}

/// Per-joint frustum visibility plus the projected keypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Visibility {
    pub mask: [bool; NUM_JOINTS],
    /// Projections of the visible joints; zero for invisible ones.
    pub keypoints: [[f64; 2]; NUM_JOINTS],
}

impl Visibility {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&v| v).count()
    }

    pub fn fully_truncated(&self) -> bool {
        self.count() == 0
    }
}

/// A joint is visible iff it is in front of the camera and projects inside
/// the image bounds.
pub fn visibility_from_truncation(joints: &Joints, camera: &CameraModel) -> Visibility {
    let mut mask = [false; NUM_JOINTS];
    let mut keypoints = [[0.0; 2]; NUM_JOINTS];
    for (j, p) in joints.iter().enumerate() {
        if let Some(uv) = camera.project(p) {
            if camera.in_bounds(&uv) {
                mask[j] = true;
                keypoints[j] = uv;
            }
        }
    }
    Visibility { mask, keypoints }
}

/// Box center and size in pixels, normalized by the focal length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBoxFeature {
    pub bx: f64,
    pub by: f64,
    pub b: f64,
    pub normalized: [f64; 3],
}

/// Bounds of the visible keypoints, side = max extent grown by 10% with a
/// floor of [`MIN_BOX_PX`].
pub fn bbox_feature(keypoints: &[[f64; 2]], mask: &[bool], camera: &CameraModel) -> Result<BBoxFeature> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut any = false;
    for (kp, &v) in keypoints.iter().zip(mask) {
        if v {
            any = true;
            for k in 0..2 {
                lo[k] = lo[k].min(kp[k]);
                hi[k] = hi[k].max(kp[k]);
            }
        }
    }
    if !any {
        return Err(Error::NoVisibleKeypoints);
    }
    let bx = 0.5 * (lo[0] + hi[0]);
    let by = 0.5 * (lo[1] + hi[1]);
    let b = ((hi[0] - lo[0]).max(hi[1] - lo[1]) * BOX_EXPANSION).max(MIN_BOX_PX);
    Ok(BBoxFeature {
        bx,
        by,
        b,
        normalized: [bx / camera.f, by / camera.f, b / camera.f],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraModel {
        CameraModel {
            f: 500.0,
            cx: 320.0,
            cy: 240.0,
            width: 640.0,
            height: 480.0,
        }
    }

    #[test]
    fn projection_examples() {
        let c = cam();
        assert_eq!(c.project(&Vector3::new(0.0, 0.0, 2.0)), Some([320.0, 240.0]));
        assert_eq!(c.project(&Vector3::new(1.0, 0.0, 2.0)), Some([570.0, 240.0]));
        assert_eq!(c.project(&Vector3::new(0.0, 0.0, -1.0)), None);
        assert_eq!(c.project(&Vector3::new(0.0, 0.0, 0.0)), None);
    }

    #[test]
    fn projection_is_depth_homogeneous() {
        let c = cam();
        let p = Vector3::new(0.3, -0.2, 1.7);
        let a = c.project(&p).unwrap();
        let b = c.project(&(p * 3.5)).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    }

    #[test]
    fn bbox_examples() {
        let c = cam();
        let b = bbox_feature(&[[100.0, 100.0], [300.0, 300.0]], &[true, true], &c).unwrap();
        assert_eq!((b.bx, b.by), (200.0, 200.0));
        assert!((b.b - 220.0).abs() < 1e-12);
        assert!((b.normalized[0] - 0.4).abs() < 1e-15);
        assert!((b.normalized[2] - 0.44).abs() < 1e-15);

        let single = bbox_feature(&[[50.0, 60.0]], &[true], &c).unwrap();
        assert_eq!(single.b, MIN_BOX_PX);
        assert_eq!(single.normalized[2], MIN_BOX_PX / 500.0);

        let c2 = CameraModel { f: 1000.0, ..c };
        let b2 = bbox_feature(&[[100.0, 100.0], [300.0, 300.0]], &[true, true], &c2).unwrap();
        for k in 0..3 {
            assert!((b2.normalized[k] - b.normalized[k] / 2.0).abs() < 1e-15);
        }

        assert!(matches!(
            bbox_feature(&[[1.0, 1.0]], &[false], &c),
            Err(Error::NoVisibleKeypoints)
        ));
    }
}
