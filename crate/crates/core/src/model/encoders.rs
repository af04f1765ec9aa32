//! Point-cloud encoder, keypoint observation encoder and timestep embedding.

use autodiff::{ParamStore, Tape, Tensor, Var};
use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;

use super::layers::{Linear, Mlp};
use crate::body::NUM_JOINTS;
use crate::error::{Error, Result};
use crate::scene::BBoxFeature;

pub const SCENE_FEATURE: usize = 128;
pub const OBS_FEATURE: usize = 128;
pub const OBS_INPUT: usize = NUM_JOINTS * 3;
pub const TEMB_DIM: usize = 64;

/// Shared per-point MLP, max-pool over points, then a linear projection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneEncoder {
    point_mlp: Mlp,
    proj: Linear,
}

impl SceneEncoder {
    pub fn register(params: &mut ParamStore, name: &str, r: &mut ChaCha8Rng) -> Self {
        let point_mlp = Mlp::register(params, &format!("{name}.point"), &[3, 32, 64], r);
        let proj = Linear::register(params, &format!("{name}.proj"), 64, SCENE_FEATURE, r);
        Self { point_mlp, proj }
    }

    /// `[clouds.len(), 128]` features. Non-empty clouds must all have the
    /// same size; empty clouds encode to zeros.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], clouds: &[&[Vector3<f64>]]) -> Result<Var> {
        let full: Vec<usize> = (0..clouds.len()).filter(|&i| !clouds[i].is_empty()).collect();
        if full.is_empty() {
            return Ok(tape.constant(Tensor::zeros(&[clouds.len(), SCENE_FEATURE])));
        }
        let m = clouds[full[0]].len();
        if full.iter().any(|&i| clouds[i].len() != m) {
            return Err(Error::InvalidArgument("scene crops differ in size".into()));
        }
        let mut xs = Vec::with_capacity(full.len() * m * 3);
        for &i in &full {
            for p in clouds[i] {
                xs.extend_from_slice(p.as_slice());
            }
        }
        let x = tape.constant(Tensor::new(vec![full.len() * m, 3], xs)?);
        let h = self.point_mlp.forward(tape, vars, x)?;
        let h = tape.silu(h)?;
        let pooled = tape.group_max(h, full.len())?;
        let feat = self.proj.forward(tape, vars, pooled)?;
        if full.len() == clouds.len() {
            return Ok(feat);
        }
        let zero = tape.constant(Tensor::zeros(&[1, SCENE_FEATURE]));
        let padded = tape.concat_rows(&[feat, zero])?;
        let mut next = 0;
        let idx: Vec<usize> = clouds
            .iter()
            .map(|c| {
                if c.is_empty() {
                    full.len()
                } else {
                    next += 1;
                    next - 1
                }
            })
            .collect();
        Ok(tape.gather_rows(padded, &idx)?)
    }
}

/// Encoder input: per joint the keypoint relative to the box center in box
/// units, then the visibility flag. Invisible joints are all zeros whatever
/// their keypoint values.
pub fn observation_input(keypoints: &[[f64; 2]; NUM_JOINTS], mask: &[bool; NUM_JOINTS], bbox: &BBoxFeature) -> [f64; OBS_INPUT] {
    let mut out = [0.0; OBS_INPUT];
    for j in 0..NUM_JOINTS {
        if mask[j] {
            out[3 * j] = (keypoints[j][0] - bbox.bx) / bbox.b;
            out[3 * j + 1] = (keypoints[j][1] - bbox.by) / bbox.b;
            out[3 * j + 2] = 1.0;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationEncoder {
    mlp: Mlp,
}

impl ObservationEncoder {
    pub fn register(params: &mut ParamStore, name: &str, r: &mut ChaCha8Rng) -> Self {
        Self {
            mlp: Mlp::register(params, name, &[OBS_INPUT, 128, OBS_FEATURE], r),
        }
    }

    /// `inputs: [B, 72]` -> `[B, 128]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], inputs: Var) -> Result<Var> {
        self.mlp.forward(tape, vars, inputs)
    }
}

/// Sinusoidal code of `t`: sines in the first half, cosines in the second.
pub fn sinusoid(t: usize) -> [f64; TEMB_DIM] {
    let half = TEMB_DIM / 2;
    let mut out = [0.0; TEMB_DIM];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[k] = a.sin();
        out[half + k] = a.cos();
    }
    out
}

/// Sinusoid followed by a two-layer MLP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepEmbedding {
    mlp: Mlp,
    pub steps: usize,
}

impl TimestepEmbedding {
    pub fn register(params: &mut ParamStore, name: &str, steps: usize, r: &mut ChaCha8Rng) -> Self {
        Self {
            mlp: Mlp::register(params, name, &[TEMB_DIM, TEMB_DIM, TEMB_DIM], r),
            steps,
        }
    }

    /// `[ts.len(), 64]`; every `t` must lie in `0..=steps`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], ts: &[usize]) -> Result<Var> {
        let mut data = Vec::with_capacity(ts.len() * TEMB_DIM);
        for &t in ts {
            if t > self.steps {
                return Err(Error::TimestepRange { t, max: self.steps });
            }
            data.extend_from_slice(&sinusoid(t));
        }
        let x = tape.constant(Tensor::new(vec![ts.len(), TEMB_DIM], data)?);
        self.mlp.forward(tape, vars, x)
    }
}
