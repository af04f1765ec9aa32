//! Deterministic pelvis-translation and body-shape regression.

use autodiff::{ParamStore, Tape, Tensor, Var};
use nalgebra::Vector3;

use super::encoders::{ObservationEncoder, SceneEncoder, OBS_FEATURE, OBS_INPUT, SCENE_FEATURE};
use super::layers::{Linear, Mlp};
use super::ModelConfig;
use crate::body::{BodyShape, NUM_BETAS};
use crate::error::Result;
use crate::rng;

pub const HEAD_OUT: usize = 3 + NUM_BETAS;
const HEAD_AUX: usize = 6;

/// Inputs of the heads: keypoints, the whole scene (subsampled) in the camera
/// frame, box feature and intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadInput {
    pub obs: [f64; OBS_INPUT],
    pub cloud: Vec<Vector3<f64>>,
    pub aux: [f64; HEAD_AUX],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOutput {
    pub gamma: Vector3<f64>,
    pub shape: BodyShape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub config: ModelConfig,
    pub params: ParamStore,
    scene: SceneEncoder,
    obs: ObservationEncoder,
    mlp: Mlp,
    out: Linear,
}

impl Heads {
    pub fn new(config: &ModelConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, rng::STREAM_INIT, 1, 0);
        let mut params = ParamStore::new();
        let scene = SceneEncoder::register(&mut params, "heads.scene", &mut r);
        let obs = ObservationEncoder::register(&mut params, "heads.obs", &mut r);
        let w = config.head_hidden;
        let mlp = Mlp::register(&mut params, "heads.mlp", &[SCENE_FEATURE + OBS_FEATURE + HEAD_AUX, w, w], &mut r);
        let out = Linear::register_zero(&mut params, "heads.out", w, HEAD_OUT);
        Self {
            config: config.clone(),
            params,
            scene,
            obs,
            mlp,
            out,
        }
    }

    /// Sets the output bias, i.e. the prediction of the untrained network.
    pub fn set_output_bias(&mut self, gamma: &Vector3<f64>, beta: &[f64; NUM_BETAS]) {
        let b = self.params.get_mut(self.out.b).data_mut();
        b[..3].copy_from_slice(gamma.as_slice());
        b[3..].copy_from_slice(beta);
    }

    /// `[S, 13]`: translation then shape coefficients.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], inputs: &[&HeadInput]) -> Result<Var> {
        let s = inputs.len();
        let mut obs = Vec::with_capacity(s * OBS_INPUT);
        let mut aux = Vec::with_capacity(s * HEAD_AUX);
        for i in inputs {
            obs.extend_from_slice(&i.obs);
            aux.extend_from_slice(&i.aux);
        }
        let obs = tape.constant(Tensor::new(vec![s, OBS_INPUT], obs)?);
        let obs = self.obs.forward(tape, vars, obs)?;
        let clouds: Vec<&[_]> = inputs.iter().map(|i| i.cloud.as_slice()).collect();
        let scene = self.scene.forward(tape, vars, &clouds)?;
        let aux = tape.constant(Tensor::new(vec![s, HEAD_AUX], aux)?);
        let x = tape.concat_cols(&[scene, obs, aux])?;
        let h = self.mlp.forward(tape, vars, x)?;
        let h = tape.silu(h)?;
        self.out.forward(tape, vars, h)
    }

    pub fn predict(&self, inputs: &[&HeadInput]) -> Result<Vec<HeadOutput>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &vars, inputs)?;
        Ok(tape
            .value(out)
            .data()
            .chunks(HEAD_OUT)
            .map(|row| {
                let mut beta = [0.0; NUM_BETAS];
                beta.copy_from_slice(&row[3..]);
                HeadOutput {
                    gamma: Vector3::new(row[0], row[1], row[2]),
                    shape: BodyShape { beta },
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untrained_heads_predict_zero_translation_and_mean_shape() {
        let heads = Heads::new(&ModelConfig::desk(), 1);
        let input = HeadInput {
            obs: [0.3; OBS_INPUT],
            cloud: vec![Vector3::new(0.0, -1.5, 2.0); 8],
            aux: [0.1, 0.2, 0.3, 0.9, 0.5, 0.4],
        };
        let out = heads.predict(&[&input, &input]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].gamma, Vector3::zeros());
        assert_eq!(out[0].shape, BodyShape::default());
        assert_eq!(out[0], out[1]);
    }
}
