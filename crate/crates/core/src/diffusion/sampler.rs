//! Reverse diffusion with optional per-joint classifier-free fusion and
//! collision-score guidance.

use autodiff::{Tape, Tensor};
use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schedule::{fuse_classifier_free, posterior_mean, NoiseSchedule, POSE_LEN};
use crate::body::{
    collision_score, pose_joints, scaled_offsets, tape_collision_score, tape_forward_kinematics, tape_rot6d_to_matrix,
    BodyShape, Pose, ShapeMap, Skeleton, NUM_JOINTS,
};
use crate::error::{Error, Result};
use crate::model::{ConditionInput, Denoiser};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub guidance: bool,
    pub cf_fusion: bool,
    /// Fuse at every step; otherwise only the last prediction is fused.
    pub cf_every_step: bool,
    /// Guidance scale `a`. The collision score averages over the guidance
    /// points and the state is normalized, so its gradient is small; 150 was
    /// chosen on validation data.
    pub scale: f64,
    /// Direction of the guidance shift along the collision gradient; `-1`
    /// decreases penetration.
    pub guidance_sign: f64,
    /// Final steps whose guidance shift is not multiplied by the posterior
    /// variance.
    pub unmodulated_steps: usize,
    /// Points of the scene crop used for the guidance score.
    pub guidance_points: usize,
    /// Hypotheses drawn per input by the `sample` command.
    pub n: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            guidance: true,
            cf_fusion: true,
            cf_every_step: true,
            scale: 150.0,
            guidance_sign: -1.0,
            unmodulated_steps: 10,
            guidance_points: 4096,
            n: 5,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.scale.is_finite() || !self.guidance_sign.is_finite() || self.guidance_points == 0 || self.n == 0 {
            return Err(Error::Config(
                "sampler: scale and sign must be finite, guidance points and n positive".into(),
            ));
        }
        Ok(())
    }

    fn guides(&self) -> bool {
        self.guidance && self.scale != 0.0
    }
}

/// One input to sample `n` hypotheses for.
#[derive(Debug, Clone)]
pub struct SampleRequest<'a> {
    pub cond: &'a ConditionInput,
    /// Scene crop around the pelvis estimate, in the same re-centered frame
    /// as the body (pelvis at the origin).
    pub guidance_cloud: &'a [Vector3<f64>],
    pub shape: BodyShape,
    pub n: usize,
    pub seed: u64,
    /// Index of the input, part of the noise-stream key.
    pub input_index: u64,
    pub record_trace: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// Noise level of `theta`.
    pub t: usize,
    /// Pose decoded from the chain state.
    pub theta: Vec<f64>,
    /// Clean-pose prediction that produced `theta`; empty for the start.
    pub theta0_hat: Vec<f64>,
    pub grad_norm: f64,
    pub collision: f64,
}

/// Per-step record of one chain: `T + 1` entries ending at the sample.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleTrace {
    pub steps: Vec<TraceStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub poses: Vec<Pose>,
    /// Collision score of each final sample on the guidance crop.
    pub collision: Vec<f64>,
    pub traces: Vec<SampleTrace>,
}

/// Gradient of the summed collision score of `n` bodies with respect to
/// their 6D rotations, and the per-body scores. Bodies are rooted at the
/// origin of `cloud`'s frame.
pub fn collision_gradient(skel: &Skeleton, offsets: &Tensor, theta: &[f64], n: usize, cloud: &[Vector3<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let th = tape.param(Tensor::new(vec![n * NUM_JOINTS, 6], theta.to_vec())?);
    let rots = tape_rot6d_to_matrix(&mut tape, th)?;
    let off = tape.constant(offsets.clone());
    let root = tape.constant(Tensor::zeros(&[n, 3]));
    let joints = tape_forward_kinematics(&mut tape, skel, rots, off, root, n)?;
    let clouds = vec![cloud; n];
    let coll = tape_collision_score(&mut tape, skel, joints, &clouds)?;
    let grads = tape.backward(coll.total)?;
    let g = grads.get(th).map_or_else(|| vec![0.0; theta.len()], |g| g.data().to_vec());
    Ok((g, coll.values))
}

pub struct Sampler<'a> {
    pub denoiser: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub skel: &'a Skeleton,
    pub map: &'a ShapeMap,
    pub config: &'a SamplerConfig,
}

fn normals(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

impl Sampler<'_> {
    /// Runs `n` chains from `T` down to 0. Chain `i` draws its start and all
    /// step noise from its own stream keyed by (seed, input, chain), in the
    /// same order whatever the flags, so configurations differ only in the
    /// mean updates.
    pub fn sample(&self, req: &SampleRequest) -> Result<SampleOutput> {
        let (d, sched, cfg) = (self.denoiser, self.schedule, self.config);
        let n = req.n;
        if n == 0 {
            return Err(Error::InvalidArgument("need at least one sample".into()));
        }
        if sched.steps != d.steps {
            return Err(Error::Config(format!(
                "schedule has {} steps, denoiser was built for {}",
                sched.steps, d.steps
            )));
        }
        let mut streams: Vec<ChaCha8Rng> = (0..n)
            .map(|i| rng::stream(req.seed, rng::STREAM_SAMPLING, req.input_index, i as u64))
            .collect();
        let mut theta: Vec<Vec<f64>> = streams.iter_mut().map(|r| normals(r, POSE_LEN)).collect();

        // condition features do not depend on the step
        let (obs_w, shared_w) = {
            let mut tape = Tape::new();
            let vars = d.params.bind(&mut tape, false);
            let p = d.project(&mut tape, &vars, &[req.cond])?;
            (tape.value(p.obs).clone(), tape.value(p.shared).clone())
        };
        let scales = self.map.bone_scales(&req.shape);
        let offsets = scaled_offsets(self.skel, &vec![scales; n]);
        let cf_rows = cfg.cf_fusion;
        let rows = if cf_rows { 2 * n } else { n };
        let mut mask = Vec::with_capacity(rows * NUM_JOINTS);
        for r in 0..rows {
            for &v in &req.cond.visible {
                mask.push(if r < n && v { 1.0 } else { 0.0 });
            }
        }

        let mut traces: Vec<SampleTrace> = vec![SampleTrace::default(); if req.record_trace { n } else { 0 }];
        // chains run on normalized states; poses are decoded for scoring
        let norm = &d.norm;
        let collisions = |theta: &[Vec<f64>]| -> Result<Vec<f64>> {
            theta
                .iter()
                .map(|th| {
                    let pose = Pose::from_flat(&norm.decode(th))?;
                    let j = pose_joints(self.skel, self.map, &pose, &req.shape, Vector3::zeros())?;
                    Ok(collision_score(self.skel, &j, req.guidance_cloud).value)
                })
                .collect()
        };
        if req.record_trace {
            let c = collisions(&theta)?;
            for i in 0..n {
                traces[i].steps.push(TraceStep {
                    t: sched.steps,
                    theta: norm.decode(&theta[i]),
                    theta0_hat: Vec::new(),
                    grad_norm: 0.0,
                    collision: c[i],
                });
            }
        }

        for t in (1..=sched.steps).rev() {
            let noise: Vec<Vec<f64>> = if t > 1 {
                streams.iter_mut().map(|r| normals(r, POSE_LEN)).collect()
            } else {
                Vec::new()
            };
            let mut tape = Tape::new();
            let vars = d.params.bind(&mut tape, false);
            let proj = crate::model::Projected {
                obs: tape.constant(obs_w.clone()),
                shared: tape.constant(shared_w.clone()),
            };
            let temb = d.project_timesteps(&mut tape, &vars, &[t])?;
            let first = d.assemble(&mut tape, &proj, temb, &vec![0; rows], &vec![0; rows], &mask)?;
            let mut stacked = Vec::with_capacity(rows * POSE_LEN);
            for _ in 0..rows / n {
                for th in &theta {
                    stacked.extend_from_slice(th);
                }
            }
            let th = tape.constant(Tensor::new(vec![rows * NUM_JOINTS, 6], stacked)?);
            let out = d.forward_projected(&mut tape, &vars, th, first)?;
            let pred = tape.value(out).data();
            let fuse_now = cf_rows && (cfg.cf_every_step || t == 1);
            let theta0: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let full = &pred[i * POSE_LEN..(i + 1) * POSE_LEN];
                    if fuse_now {
                        let none = &pred[(n + i) * POSE_LEN..(n + i + 1) * POSE_LEN];
                        fuse_classifier_free(full, none, &req.cond.visible)
                    } else {
                        full.to_vec()
                    }
                })
                .collect();

            let mut grad_norms = vec![0.0; n];
            let mut shift: Option<Vec<f64>> = None;
            if cfg.guides() {
                let flat: Vec<f64> = theta.iter().flat_map(|th| norm.decode(th)).collect();
                let (g, _) = collision_gradient(self.skel, &offsets, &flat, n, req.guidance_cloud)?;
                let g = norm.pull_back(&g);
                let modulation = if t > cfg.unmodulated_steps { sched.sigma2[t] } else { 1.0 };
                let k = cfg.scale * cfg.guidance_sign * modulation;
                for i in 0..n {
                    grad_norms[i] = g[i * POSE_LEN..(i + 1) * POSE_LEN].iter().map(|x| x * x).sum::<f64>().sqrt();
                }
                shift = Some(g.iter().map(|x| k * x).collect());
            }

            let s = sched.sigma2[t].sqrt();
            for i in 0..n {
                let mut next = posterior_mean(&theta[i], &theta0[i], t, sched)?;
                if let Some(sh) = &shift {
                    for (m, x) in next.iter_mut().zip(&sh[i * POSE_LEN..(i + 1) * POSE_LEN]) {
                        *m += x;
                    }
                }
                if t > 1 {
                    for (m, z) in next.iter_mut().zip(&noise[i]) {
                        *m += s * z;
                    }
                }
                if next.iter().any(|x| !x.is_finite()) {
                    return Err(Error::SamplingNonFinite { step: t });
                }
                theta[i] = next;
            }
            if req.record_trace {
                let c = collisions(&theta)?;
                for i in 0..n {
                    traces[i].steps.push(TraceStep {
                        t: t - 1,
                        theta: norm.decode(&theta[i]),
                        theta0_hat: norm.decode(&theta0[i]),
                        grad_norm: grad_norms[i],
                        collision: c[i],
                    });
                }
            }
        }

        let collision = collisions(&theta)?;
        let poses = theta.iter().map(|th| Pose::from_flat(&norm.decode(th))).collect::<Result<Vec<_>>>()?;
        Ok(SampleOutput {
            poses,
            collision,
            traces,
        })
    }
}
