//! Networks: the graph denoiser with its condition encoders, the translation
//! and shape heads, and the checkpoint format.

mod checkpoint;
mod denoiser;
mod encoders;
mod heads;
mod layers;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_store, store_tensors, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use denoiser::{Denoiser, JointCondition, PoseNorm, Projected, AUX_DIM, COND_DIM, MIN_POSE_STD, SHARED_DIM};
pub use encoders::{
    observation_input, sinusoid, ObservationEncoder, SceneEncoder, TimestepEmbedding, OBS_FEATURE, OBS_INPUT,
    SCENE_FEATURE, TEMB_DIM,
};
pub use heads::{HeadInput, HeadOutput, Heads, HEAD_OUT};
pub use layers::{Linear, Mlp};

use crate::body::NUM_JOINTS;
use crate::error::{Error, Result};
use crate::scene::{crop_scene, resize_cloud, SampleRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the graph layers.
    pub hidden: usize,
    /// Residual graph blocks between the input and output layers.
    pub blocks: usize,
    /// Points in the denoiser's scene crop.
    pub crop_points: usize,
    /// Points of the whole scene seen by the heads.
    pub head_points: usize,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            blocks: 4,
            crop_points: 4096,
            head_points: 4096,
            head_hidden: 256,
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            hidden: 64,
            blocks: 4,
            crop_points: 256,
            head_points: 512,
            head_hidden: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.crop_points == 0 || self.head_points == 0 || self.head_hidden == 0 {
            return Err(Error::Config("model widths and point counts must be positive".into()));
        }
        Ok(())
    }
}

/// Numeric inputs from which the denoiser builds one condition set.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionInput {
    pub obs: [f64; OBS_INPUT],
    pub visible: [bool; NUM_JOINTS],
    /// Scene crop around the pelvis estimate, re-centered on it; empty when
    /// no scene point falls in the window.
    pub crop: Vec<Vector3<f64>>,
    /// Pelvis estimate, normalized box feature, normalized intrinsics.
    pub aux: [f64; AUX_DIM],
}

impl ConditionInput {
    /// `scene` is the record's scene in its camera frame.
    pub fn from_record(rec: &SampleRecord, gamma_hat: &Vector3<f64>, scene: &[Vector3<f64>], crop_points: usize) -> Result<Self> {
        let bbox = rec.bbox()?;
        let k = rec.camera.normalized();
        let mut aux = [0.0; AUX_DIM];
        aux[..3].copy_from_slice(gamma_hat.as_slice());
        aux[3..6].copy_from_slice(&bbox.normalized);
        aux[6..].copy_from_slice(&k);
        Ok(Self {
            obs: observation_input(&rec.keypoint_array(), &rec.visible, &bbox),
            visible: rec.visible,
            crop: crop_scene(scene, gamma_hat, crop_points).points,
            aux,
        })
    }

    pub fn gamma_hat(&self) -> Vector3<f64> {
        Vector3::new(self.aux[0], self.aux[1], self.aux[2])
    }
}

impl HeadInput {
    pub fn from_record(rec: &SampleRecord, scene: &[Vector3<f64>], points: usize) -> Result<Self> {
        let bbox = rec.bbox()?;
        let k = rec.camera.normalized();
        Ok(Self {
            obs: observation_input(&rec.keypoint_array(), &rec.visible, &bbox),
            cloud: resize_cloud(scene, points),
            aux: [bbox.normalized[0], bbox.normalized[1], bbox.normalized[2], k[0], k[1], k[2]],
        })
    }
}
