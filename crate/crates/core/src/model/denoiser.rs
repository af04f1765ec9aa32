//! Visibility-aware modulated graph-convolution denoiser.
//!
//! Node features are the embedded noisy rotation of each joint concatenated
//! with that joint's condition vector:
//!
//! | columns   | content                                   |
//! |-----------|-------------------------------------------|
//! | 0..128    | observation feature, zero if joint hidden |
//! | 128..256  | scene feature                             |
//! | 256..265  | pelvis estimate, box feature, intrinsics  |
//! | 265..329  | timestep embedding                        |
//!
//! Each graph layer computes `Aff ((X W) * (1 + M)) + b`, where `M` holds one
//! learnable modulation vector per joint and `Aff` is the row-normalized sum
//! of the skeleton adjacency and a learnable matrix `Q`.

use autodiff::{ParamStore, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::encoders::{ObservationEncoder, SceneEncoder, TimestepEmbedding, OBS_FEATURE, SCENE_FEATURE, TEMB_DIM};
use super::layers::{uniform_init, Linear};
use super::{ConditionInput, ModelConfig};
use crate::body::{Pose, Skeleton, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::rng;

pub const AUX_DIM: usize = 9;
pub const SHARED_DIM: usize = SCENE_FEATURE + AUX_DIM;
pub const COND_DIM: usize = OBS_FEATURE + SHARED_DIM + TEMB_DIM;
const POSE_DIM: usize = 6;
const POSE_LEN: usize = NUM_JOINTS * POSE_DIM;
/// Lower bound on the per-dimension scale of [`PoseNorm`].
pub const MIN_POSE_STD: f64 = 0.01;

/// Per-dimension affine map between 6D rotations and the diffusion state,
/// `state = (theta - mean) / std`. Fitted on the training poses so that
/// noise and pose variation are on the same scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for PoseNorm {
    fn default() -> Self {
        Self {
            mean: vec![0.0; POSE_LEN],
            std: vec![1.0; POSE_LEN],
        }
    }
}

impl PoseNorm {
    /// Mean and standard deviation of each dimension, the latter clamped
    /// below at [`MIN_POSE_STD`].
    pub fn fit<'a>(poses: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut sum = vec![0.0; POSE_LEN];
        let mut sq = vec![0.0; POSE_LEN];
        let mut n = 0usize;
        for p in poses {
            if p.len() != POSE_LEN {
                return Err(Error::InvalidArgument(format!("pose of length {}, expected {POSE_LEN}", p.len())));
            }
            for ((s, q), x) in sum.iter_mut().zip(sq.iter_mut()).zip(p) {
                *s += x;
                *q += x * x;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::InvalidArgument("no poses to fit the normalization on".into()));
        }
        let n = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(MIN_POSE_STD))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn from_tensors(mean: &Tensor, std: &Tensor) -> Result<Self> {
        if mean.len() != POSE_LEN || std.len() != POSE_LEN {
            return Err(Error::Checkpoint(format!("pose normalization must have {POSE_LEN} entries")));
        }
        if !mean.is_finite() || std.data().iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Checkpoint("pose normalization holds invalid values".into()));
        }
        Ok(Self {
            mean: mean.data().to_vec(),
            std: std.data().to_vec(),
        })
    }

    pub fn tensors(&self) -> (Tensor, Tensor) {
        (
            Tensor::new(vec![POSE_LEN], self.mean.clone()).expect("pose length"),
            Tensor::new(vec![POSE_LEN], self.std.clone()).expect("pose length"),
        )
    }

    /// Rotations to state; `theta` holds whole poses back to back.
    pub fn encode(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .enumerate()
            .map(|(i, x)| (x - self.mean[i % POSE_LEN]) / self.std[i % POSE_LEN])
            .collect()
    }

    pub fn decode(&self, state: &[f64]) -> Vec<f64> {
        state
            .iter()
            .enumerate()
            .map(|(i, x)| x * self.std[i % POSE_LEN] + self.mean[i % POSE_LEN])
            .collect()
    }

    /// Gradient with respect to the state from one with respect to the
    /// rotations.
    pub fn pull_back(&self, grad: &[f64]) -> Vec<f64> {
        grad.iter().enumerate().map(|(i, g)| g * self.std[i % POSE_LEN]).collect()
    }

    /// [`Self::decode`] on the tape for `x: [rows * J, 6]`.
    pub fn tape_decode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let rows = tape.value(x).len() / POSE_LEN;
        let tile = |v: &[f64]| Tensor::new(vec![rows * NUM_JOINTS, POSE_DIM], v.repeat(rows));
        let s = tape.constant(tile(&self.std)?);
        let m = tape.constant(tile(&self.mean)?);
        let y = tape.mul(x, s)?;
        Ok(tape.add(y, m)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct GcnLayer {
    w: usize,
    b: usize,
    node_mod: usize,
    affinity: usize,
}

impl GcnLayer {
    fn register(params: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, r: &mut ChaCha8Rng) -> Self {
        Self {
            w: params.add(format!("{name}.w"), uniform_init(&[fan_in, fan_out], fan_in, r)),
            b: params.add(format!("{name}.b"), uniform_init(&[fan_out], fan_in, r)),
            node_mod: params.add(format!("{name}.mod"), Tensor::zeros(&[NUM_JOINTS, fan_out])),
            affinity: params.add(format!("{name}.affinity"), Tensor::zeros(&[NUM_JOINTS, NUM_JOINTS])),
        }
    }

    /// Row-normalized `A + Q`.
    fn affinity(&self, tape: &mut Tape, vars: &[Var], adj: Var) -> Result<Var> {
        let s = tape.add(adj, vars[self.affinity])?;
        let a = tape.abs(s)?;
        let rs = tape.sum_last(a)?;
        Ok(tape.div(s, rs)?)
    }

    /// Graph aggregation of already transformed features `xw: [R*J, out]`.
    fn aggregate(&self, tape: &mut Tape, vars: &[Var], adj: Var, xw: Var) -> Result<Var> {
        let shape = tape.value(xw).shape().to_vec();
        let (rows, out) = (shape[0], shape[1]);
        let x3 = tape.reshape(xw, &[rows / NUM_JOINTS, NUM_JOINTS, out])?;
        let m = tape.add_scalar(vars[self.node_mod], 1.0)?;
        let x3 = tape.mul(x3, m)?;
        let x = tape.reshape(x3, &[rows, out])?;
        let aff = self.affinity(tape, vars, adj)?;
        let y = tape.block_left_matmul(aff, x)?;
        Ok(tape.add(y, vars[self.b])?)
    }

    fn forward(&self, tape: &mut Tape, vars: &[Var], adj: Var, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, vars[self.w])?;
        self.aggregate(tape, vars, adj, xw)
    }
}

/// Condition vector of one joint, without the timestep embedding (which
/// [`Denoiser::denoise`] derives from `t`).
#[derive(Debug, Clone, PartialEq)]
pub struct JointCondition {
    pub obs: Vec<f64>,
    pub scene: Vec<f64>,
    pub gamma_hat: Vec<f64>,
    pub bbox: Vec<f64>,
    pub intrinsics: Vec<f64>,
}

impl JointCondition {
    fn check(&self, joint: usize) -> Result<()> {
        let fields: [(&'static str, &[f64], usize); 5] = [
            ("obs", &self.obs, OBS_FEATURE),
            ("scene", &self.scene, SCENE_FEATURE),
            ("gamma_hat", &self.gamma_hat, 3),
            ("bbox", &self.bbox, 3),
            ("intrinsics", &self.intrinsics, 3),
        ];
        for (field, v, expected) in fields {
            if v.len() != expected {
                return Err(Error::ConditionDim {
                    joint,
                    field,
                    expected,
                    got: v.len(),
                });
            }
        }
        Ok(())
    }
}

/// Per-input condition features projected through the first graph layer.
#[derive(Debug, Clone, Copy)]
pub struct Projected {
    /// `[S, H]` observation part, before masking.
    pub obs: Var,
    /// `[S, H]` scene, pelvis, box and intrinsics part.
    pub shared: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: ModelConfig,
    pub steps: usize,
    pub params: ParamStore,
    adjacency: Tensor,
    pose_embed: Linear,
    layers: Vec<GcnLayer>,
    pub scene: SceneEncoder,
    pub obs: ObservationEncoder,
    pub temb: TimestepEmbedding,
    /// Map from rotations to the state the network denoises.
    pub norm: PoseNorm,
}

impl Denoiser {
    pub fn new(config: &ModelConfig, skel: &Skeleton, steps: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, rng::STREAM_INIT, 0, 0);
        let mut params = ParamStore::new();
        let h = config.hidden;
        let pose_embed = Linear::register(&mut params, "denoiser.pose_embed", POSE_DIM, h, &mut r);
        let mut layers = vec![GcnLayer::register(&mut params, "denoiser.gcn_in", h + COND_DIM, h, &mut r)];
        for i in 0..config.blocks {
            layers.push(GcnLayer::register(&mut params, &format!("denoiser.block{i}"), h, h, &mut r));
        }
        layers.push(GcnLayer::register(&mut params, "denoiser.gcn_out", h, POSE_DIM, &mut r));
        let scene = SceneEncoder::register(&mut params, "denoiser.scene", &mut r);
        let obs = ObservationEncoder::register(&mut params, "denoiser.obs", &mut r);
        let temb = TimestepEmbedding::register(&mut params, "denoiser.temb", steps, &mut r);
        let adjacency = Tensor::new(vec![NUM_JOINTS, NUM_JOINTS], skel.normalized_adjacency()).expect("J x J");
        Self {
            config: config.clone(),
            steps,
            params,
            adjacency,
            pose_embed,
            layers,
            scene,
            obs,
            temb,
            norm: PoseNorm::default(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    fn w_in(&self) -> usize {
        self.layers[0].w
    }

    /// Reference path: explicit node features `[pose embedding, condition]`.
    /// `theta: [R*J, 6]`, `cond: [R*J, 329]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], theta: Var, cond: Var) -> Result<Var> {
        let pe = self.pose_embed.forward(tape, vars, theta)?;
        let x = tape.concat_cols(&[pe, cond])?;
        let xw = tape.matmul(x, vars[self.w_in()])?;
        self.trunk(tape, vars, xw)
    }

    /// Fast path: the condition's first-layer contribution `first: [R*J, H]`
    /// is assembled by the caller from [`Projected`] parts.
    pub fn forward_projected(&self, tape: &mut Tape, vars: &[Var], theta: Var, first: Var) -> Result<Var> {
        let h = self.hidden();
        let pe = self.pose_embed.forward(tape, vars, theta)?;
        let wp = tape.slice_rows(vars[self.w_in()], 0, h)?;
        let xw = tape.matmul(pe, wp)?;
        let xw = tape.add(xw, first)?;
        self.trunk(tape, vars, xw)
    }

    fn trunk(&self, tape: &mut Tape, vars: &[Var], xw: Var) -> Result<Var> {
        let adj = tape.constant(self.adjacency.clone());
        let (first, rest) = self.layers.split_first().expect("input layer");
        let (last, blocks) = rest.split_last().expect("output layer");
        let x = first.aggregate(tape, vars, adj, xw)?;
        let mut x = tape.silu(x)?;
        for l in blocks {
            let y = l.forward(tape, vars, adj, x)?;
            let y = tape.silu(y)?;
            x = tape.add(x, y)?;
        }
        last.forward(tape, vars, adj, x)
    }

    fn w_in_rows(&self, tape: &mut Tape, vars: &[Var], start: usize, end: usize) -> Result<Var> {
        let h = self.hidden();
        Ok(tape.slice_rows(vars[self.w_in()], h + start, h + end)?)
    }

    /// Encodes and projects the inputs' conditions: `[S, H]` each.
    pub fn project(&self, tape: &mut Tape, vars: &[Var], inputs: &[&ConditionInput]) -> Result<Projected> {
        let (obs_feat, shared) = self.encode(tape, vars, inputs)?;
        let wo = self.w_in_rows(tape, vars, 0, OBS_FEATURE)?;
        let ws = self.w_in_rows(tape, vars, OBS_FEATURE, OBS_FEATURE + SHARED_DIM)?;
        Ok(Projected {
            obs: tape.matmul(obs_feat, wo)?,
            shared: tape.matmul(shared, ws)?,
        })
    }

    /// Observation features `[S, 128]` and shared features `[S, 137]`.
    pub fn encode(&self, tape: &mut Tape, vars: &[Var], inputs: &[&ConditionInput]) -> Result<(Var, Var)> {
        let mut obs_in = Vec::with_capacity(inputs.len() * super::encoders::OBS_INPUT);
        let mut aux = Vec::with_capacity(inputs.len() * AUX_DIM);
        for c in inputs {
            obs_in.extend_from_slice(&c.obs);
            aux.extend_from_slice(&c.aux);
        }
        let obs_in = tape.constant(Tensor::new(vec![inputs.len(), super::encoders::OBS_INPUT], obs_in)?);
        let obs_feat = self.obs.forward(tape, vars, obs_in)?;
        let clouds: Vec<&[_]> = inputs.iter().map(|c| c.crop.as_slice()).collect();
        let scene = self.scene.forward(tape, vars, &clouds)?;
        let aux = tape.constant(Tensor::new(vec![inputs.len(), AUX_DIM], aux)?);
        let shared = tape.concat_cols(&[scene, aux])?;
        Ok((obs_feat, shared))
    }

    /// Projected timestep embeddings `[ts.len(), H]`.
    pub fn project_timesteps(&self, tape: &mut Tape, vars: &[Var], ts: &[usize]) -> Result<Var> {
        let e = self.temb.forward(tape, vars, ts)?;
        let wt = self.w_in_rows(tape, vars, OBS_FEATURE + SHARED_DIM, COND_DIM)?;
        Ok(tape.matmul(e, wt)?)
    }

    /// First-layer condition term for `rows` pose rows. Row `r` uses input
    /// `input_of[r]`, timestep row `t_of[r]` and keeps the observation of
    /// joint `j` with weight `obs_mask[r * J + j]` (0 or 1).
    pub fn assemble(
        &self,
        tape: &mut Tape,
        proj: &Projected,
        temb: Var,
        input_of: &[usize],
        t_of: &[usize],
        obs_mask: &[f64],
    ) -> Result<Var> {
        let rows = input_of.len();
        if t_of.len() != rows || obs_mask.len() != rows * NUM_JOINTS {
            return Err(Error::InvalidArgument("condition row layout mismatch".into()));
        }
        let expand = |v: &[usize]| -> Vec<usize> { v.iter().flat_map(|&i| std::iter::repeat_n(i, NUM_JOINTS)).collect() };
        let ij = expand(input_of);
        let o = tape.gather_rows(proj.obs, &ij)?;
        let m = tape.constant(Tensor::new(vec![rows * NUM_JOINTS, 1], obs_mask.to_vec())?);
        let o = tape.mul(o, m)?;
        let s = tape.gather_rows(proj.shared, &ij)?;
        let t = tape.gather_rows(temb, &expand(t_of))?;
        let x = tape.add(o, s)?;
        Ok(tape.add(x, t)?)
    }

    /// Full per-joint condition matrix `[J, 329]` for one input at step `t`,
    /// with the observation feature zeroed where `mask` is false.
    pub fn condition_matrix(&self, input: &ConditionInput, t: usize, mask: &[bool; NUM_JOINTS]) -> Result<Vec<JointCondition>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let (obs, shared) = self.encode(&mut tape, &vars, &[input])?;
        let _ = self.temb.forward(&mut tape, &vars, &[t])?;
        let obs = tape.value(obs).data().to_vec();
        let shared = tape.value(shared).data().to_vec();
        Ok((0..NUM_JOINTS)
            .map(|j| JointCondition {
                obs: if mask[j] { obs.clone() } else { vec![0.0; OBS_FEATURE] },
                scene: shared[..SCENE_FEATURE].to_vec(),
                gamma_hat: shared[SCENE_FEATURE..SCENE_FEATURE + 3].to_vec(),
                bbox: shared[SCENE_FEATURE + 3..SCENE_FEATURE + 6].to_vec(),
                intrinsics: shared[SCENE_FEATURE + 6..].to_vec(),
            })
            .collect())
    }

    /// Predicts the clean state from the noisy state `theta_t` at step `t`
    /// given one condition per joint. Both are states in the sense of
    /// [`PoseNorm`], carried in a [`Pose`].
    pub fn denoise(&self, theta_t: &Pose, t: usize, conds: &[JointCondition]) -> Result<Pose> {
        if conds.len() != NUM_JOINTS {
            return Err(Error::InvalidArgument(format!("{} joint conditions, expected {NUM_JOINTS}", conds.len())));
        }
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let temb = self.temb.forward(&mut tape, &vars, &[t])?;
        let temb = tape.value(temb).data().to_vec();
        let mut data = Vec::with_capacity(NUM_JOINTS * COND_DIM);
        for (j, c) in conds.iter().enumerate() {
            c.check(j)?;
            for part in [&c.obs, &c.scene, &c.gamma_hat, &c.bbox, &c.intrinsics] {
                data.extend_from_slice(part);
            }
            data.extend_from_slice(&temb);
        }
        let cond = tape.constant(Tensor::new(vec![NUM_JOINTS, COND_DIM], data)?);
        let theta = tape.constant(theta_t.to_tensor());
        let out = self.forward(&mut tape, &vars, theta, cond)?;
        Pose::from_flat(tape.value(out).data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::IDENTITY_6D;
    use nalgebra::Vector3;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            hidden: 16,
            ..ModelConfig::desk()
        }
    }

    fn input(seed: u64) -> ConditionInput {
        let mut r = rng::stream(seed, "test", 0, 0);
        let mut obs = [0.0; super::super::encoders::OBS_INPUT];
        for x in obs.iter_mut() {
            *x = r.random_range(-1.0..1.0);
        }
        let crop = (0..32)
            .map(|_| Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..0.5), r.random_range(-1.0..1.0)))
            .collect();
        let mut visible = [true; NUM_JOINTS];
        for v in visible.iter_mut().skip(12) {
            *v = r.random_bool(0.3);
        }
        ConditionInput {
            obs,
            visible,
            crop,
            aux: [0.1, -0.8, 1.6, 0.3, 0.2, 0.5, 0.9, 0.5, 0.4],
        }
    }

    fn random_pose(seed: u64) -> Pose {
        let mut r = rng::stream(seed, "pose", 0, 0);
        let mut p = Pose::default();
        for row in p.0.iter_mut() {
            for x in row.iter_mut() {
                *x = r.random_range(-1.5..1.5);
            }
        }
        p
    }

    #[test]
    fn projected_path_matches_reference() {
        let skel = Skeleton::default();
        let d = Denoiser::new(&small_config(), &skel, 100, 3);
        let inp = input(1);
        let theta = random_pose(2);
        let t = 42;
        let conds = d.condition_matrix(&inp, t, &inp.visible).unwrap();
        let reference = d.denoise(&theta, t, &conds).unwrap();

        let mut tape = Tape::new();
        let vars = d.params.bind(&mut tape, false);
        let proj = d.project(&mut tape, &vars, &[&inp]).unwrap();
        let temb = d.project_timesteps(&mut tape, &vars, &[t]).unwrap();
        let mask: Vec<f64> = inp.visible.iter().map(|&v| f64::from(u8::from(v))).collect();
        let first = d.assemble(&mut tape, &proj, temb, &[0], &[0], &mask).unwrap();
        let th = tape.constant(theta.to_tensor());
        let out = d.forward_projected(&mut tape, &vars, th, first).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(reference.flat()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn hidden_observations_do_not_matter_and_output_is_repeatable() {
        let d = Denoiser::new(&small_config(), &Skeleton::default(), 100, 4);
        let inp = input(5);
        let theta = random_pose(6);
        let conds = d.condition_matrix(&inp, 10, &inp.visible).unwrap();
        let a = d.denoise(&theta, 10, &conds).unwrap();
        assert_eq!(a, d.denoise(&theta, 10, &conds).unwrap());
        assert!(a.is_finite());
        let all_hidden = d.condition_matrix(&inp, 10, &[false; NUM_JOINTS]).unwrap();
        assert!(d.denoise(&theta, 10, &all_hidden).unwrap().is_finite());
        for (c, &v) in conds.iter().zip(&inp.visible) {
            assert_eq!(c.obs.iter().all(|&x| x == 0.0), !v);
        }
        // with every joint hidden the keypoint evidence cannot leak through
        let other = ConditionInput { obs: input(77).obs, ..inp.clone() };
        let hidden_other = d.condition_matrix(&other, 10, &[false; NUM_JOINTS]).unwrap();
        assert_eq!(
            d.denoise(&theta, 10, &all_hidden).unwrap(),
            d.denoise(&theta, 10, &hidden_other).unwrap()
        );
    }

    #[test]
    fn pose_norm_round_trips_and_matches_on_tape() {
        let poses: Vec<Vec<f64>> = (0..5).map(|k| random_pose(20 + k).flat()).collect();
        let mut norm = PoseNorm::fit(poses.iter().map(|p| p.as_slice())).unwrap();
        let k = 17;
        let col: Vec<f64> = poses.iter().map(|p| p[k]).collect();
        let m = col.iter().sum::<f64>() / 5.0;
        let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 5.0;
        assert!((norm.mean[k] - m).abs() < 1e-12 && (norm.std[k] - v.sqrt()).abs() < 1e-12);
        // a constant dimension gets the floor
        let flat: Vec<Vec<f64>> = vec![vec![0.5; NUM_JOINTS * 6]; 3];
        let c = PoseNorm::fit(flat.iter().map(|p| p.as_slice())).unwrap();
        assert!(c.std.iter().all(|&s| s == MIN_POSE_STD));
        assert!(PoseNorm::fit(std::iter::empty()).is_err());

        norm.std[0] = 0.3;
        let two: Vec<f64> = poses[0].iter().chain(&poses[1]).copied().collect();
        let back = norm.decode(&norm.encode(&two));
        for (a, b) in back.iter().zip(&two) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(norm.pull_back(&[1.0; 2])[0], 0.3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2 * NUM_JOINTS, 6], two.clone()).unwrap());
        let y = norm.tape_decode(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), norm.decode(&two).as_slice());
    }

    #[test]
    fn condition_dimension_errors_name_joint_and_field() {
        let d = Denoiser::new(&small_config(), &Skeleton::default(), 100, 4);
        let inp = input(5);
        let mut conds = d.condition_matrix(&inp, 3, &inp.visible).unwrap();
        conds[7].bbox.push(1.0);
        let err = d.denoise(&Pose::default(), 3, &conds).unwrap_err();
        assert!(matches!(
            err,
            Error::ConditionDim {
                joint: 7,
                field: "bbox",
                expected: 3,
                got: 4
            }
        ));
        assert!(d.denoise(&Pose::default(), 3, &conds[..5]).is_err());
    }

    #[test]
    fn receptive_field_is_six_hops_without_learned_affinity() {
        let skel = Skeleton::default();
        let d = Denoiser::new(&small_config(), &skel, 100, 8);
        let hops = skel.hop_distances();
        let inp = input(9);
        let theta = Pose([IDENTITY_6D; NUM_JOINTS]);
        let base_conds = d.condition_matrix(&inp, 50, &inp.visible).unwrap();
        let base = d.denoise(&theta, 50, &base_conds).unwrap();
        for src in [0usize, 10, 22] {
            let mut conds = base_conds.clone();
            conds[src].scene[3] += 0.5;
            conds[src].gamma_hat[1] -= 0.3;
            let out = d.denoise(&theta, 50, &conds).unwrap();
            for j in 0..NUM_JOINTS {
                let changed = out.0[j] != base.0[j];
                if hops[src][j] >= 7 {
                    assert!(!changed, "joint {j} ({} hops from {src}) changed", hops[src][j]);
                }
                if j == src {
                    assert!(changed);
                }
            }
        }
    }
}
