use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use autodiff::{Adam, AdamConfig, ParamStore, Tape, Tensor, Var};
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use super::losses::{
    loss_2d, loss_3d, loss_beta, loss_collision, loss_orth, loss_simple, total_loss, LossReport, LossTerms,
    LossWeights, ReprojectionTarget,
};
use crate::body::{
    forward_kinematics, scaled_offsets, tape_forward_kinematics, tape_rot6d_to_matrix, ShapeMap, Skeleton, NUM_BETAS,
    NUM_BONES, NUM_JOINTS,
};
use crate::config::ExperimentConfig;
use crate::diffusion::{forward_noise, NoiseSchedule, POSE_LEN};
use crate::error::{io_err, Error, Result};
use crate::exec::Execution;
use crate::model::{load_store, store_tensors, Checkpoint, ConditionInput, Denoiser, HeadInput, Heads, ModelConfig, PoseNorm};
use crate::rng;
use crate::scene::{read_split, SampleRecord, SceneCache, Split};

pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Heads,
    Denoiser,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Heads => "heads",
            Stage::Denoiser => "denoiser",
        }
    }

    fn index(self) -> u64 {
        match self {
            Stage::Heads => 0,
            Stage::Denoiser => 1,
        }
    }
}

/// `<run>/<stage>_<which>.ckpt`, `which` being `last` or `best`.
pub fn checkpoint_path(run: &Path, stage: Stage, which: &str) -> PathBuf {
    run.join(format!("{}_{which}.ckpt", stage.name()))
}

/// A training record with everything the losses need precomputed.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: u64,
    /// Condition built around the ground-truth translation.
    pub cond: ConditionInput,
    pub head: HeadInput,
    pub theta: Vec<f64>,
    /// Ground-truth rotations, `[J, 9]` column-major.
    pub rots: Vec<f64>,
    pub scales: [f64; NUM_BONES],
    /// Ground-truth joints relative to the pelvis, `[J, 3]`.
    pub rel_joints: Vec<f64>,
    pub gamma: Vector3<f64>,
    pub beta: [f64; NUM_BETAS],
    pub reproj: ReprojectionTarget,
}

pub fn prepare_samples(
    records: &[SampleRecord],
    model: &ModelConfig,
    skel: &Skeleton,
    map: &ShapeMap,
    cache: &SceneCache,
    exec: Execution,
) -> Result<Vec<TrainSample>> {
    exec.try_map_range(records.len(), |i| {
        let rec = &records[i];
        let scene = cache.camera_frame(rec);
        let gamma = rec.gamma_vec();
        let mats = rec.theta.matrices()?;
        let scales = map.bone_scales(&rec.shape());
        let rel = forward_kinematics(skel, &mats, &scales, Vector3::zeros());
        Ok(TrainSample {
            id: rec.id,
            cond: ConditionInput::from_record(rec, &gamma, &scene.points, model.crop_points)?,
            head: HeadInput::from_record(rec, &scene.points, model.head_points)?,
            theta: rec.theta.flat(),
            rots: mats.iter().flat_map(|m| m.as_slice().to_vec()).collect(),
            scales,
            rel_joints: rel.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
            gamma,
            beta: rec.beta,
            reproj: ReprojectionTarget {
                gamma,
                camera: rec.camera,
                keypoints: rec.keypoint_array(),
                visible: rec.visible,
            },
        })
    })
}

/// Per-sample diffusion step, noise and condition dropout of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNoise {
    pub t: Vec<usize>,
    pub noise: Vec<Vec<f64>>,
    pub dropped: Vec<bool>,
}

fn normals(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

impl BatchNoise {
    pub fn draw(r: &mut ChaCha8Rng, n: usize, steps: usize, dropout: f64) -> Self {
        let mut out = Self {
            t: Vec::with_capacity(n),
            noise: Vec::with_capacity(n),
            dropped: Vec::with_capacity(n),
        };
        for _ in 0..n {
            out.t.push(r.random_range(1..=steps));
            out.noise.push(normals(r, POSE_LEN));
            out.dropped.push(r.random::<f64>() < dropout);
        }
        out
    }
}

/// Weighted denoiser loss of a batch. `epoch` gates the collision term.
#[allow(clippy::too_many_arguments)]
pub fn denoiser_batch_loss(
    d: &Denoiser,
    tape: &mut Tape,
    vars: &[Var],
    skel: &Skeleton,
    sched: &NoiseSchedule,
    batch: &[&TrainSample],
    noise: &BatchNoise,
    weights: &LossWeights,
    epoch: usize,
) -> Result<(Var, LossReport)> {
    let b = batch.len();
    let conds: Vec<&ConditionInput> = batch.iter().map(|s| &s.cond).collect();
    let proj = d.project(tape, vars, &conds)?;
    let temb = d.project_timesteps(tape, vars, &noise.t)?;
    let idx: Vec<usize> = (0..b).collect();
    let mut mask = Vec::with_capacity(b * NUM_JOINTS);
    for (s, &dropped) in batch.iter().zip(&noise.dropped) {
        // dropout removes the observation from every joint at once
        mask.extend(s.cond.visible.iter().map(|&v| if v && !dropped { 1.0 } else { 0.0 }));
    }
    let first = d.assemble(tape, &proj, temb, &idx, &idx, &mask)?;

    let mut theta_t = Vec::with_capacity(b * POSE_LEN);
    for (i, s) in batch.iter().enumerate() {
        theta_t.extend(forward_noise(&d.norm.encode(&s.theta), noise.t[i], sched, &noise.noise[i])?);
    }
    let th = tape.constant(Tensor::new(vec![b * NUM_JOINTS, 6], theta_t)?);
    let state = d.forward_projected(tape, vars, th, first)?;
    let out = d.norm.tape_decode(tape, state)?;

    let rots = tape_rot6d_to_matrix(tape, out)?;
    let gt_rots = tape.constant(Tensor::new(vec![b * NUM_JOINTS, 9], batch.iter().flat_map(|s| s.rots.clone()).collect())?);
    let simple = loss_simple(tape, rots, gt_rots)?;

    let scales: Vec<[f64; NUM_BONES]> = batch.iter().map(|s| s.scales).collect();
    let offsets = tape.constant(scaled_offsets(skel, &scales));
    let root = tape.constant(Tensor::zeros(&[b, 3]));
    let joints = tape_forward_kinematics(tape, skel, rots, offsets, root, b)?;
    let gt_joints = tape.constant(Tensor::new(
        vec![b * NUM_JOINTS, 3],
        batch.iter().flat_map(|s| s.rel_joints.clone()).collect(),
    )?);
    let three_d = loss_3d(tape, joints, gt_joints)?;
    let targets: Vec<ReprojectionTarget> = batch.iter().map(|s| s.reproj.clone()).collect();
    let two_d = loss_2d(tape, joints, &targets)?;
    let clouds: Vec<&[Vector3<f64>]> = batch.iter().map(|s| s.cond.crop.as_slice()).collect();
    let coll = loss_collision(tape, skel, joints, &clouds)?;
    let orth = loss_orth(tape, out)?;
    let terms = LossTerms {
        simple: Some(simple),
        three_d: Some(three_d),
        two_d,
        beta: None,
        coll: Some(coll),
        orth: Some(orth),
    };
    total_loss(tape, &terms, weights, epoch)
}

/// Unweighted translation plus shape loss of the heads on a batch.
pub fn heads_batch_loss(h: &Heads, tape: &mut Tape, vars: &[Var], batch: &[&TrainSample]) -> Result<(Var, LossReport)> {
    let b = batch.len();
    let inputs: Vec<&HeadInput> = batch.iter().map(|s| &s.head).collect();
    let out = h.forward(tape, vars, &inputs)?;
    let g = tape.slice_cols(out, 0, 3)?;
    let beta = tape.slice_cols(out, 3, 3 + NUM_BETAS)?;
    let gt_g = tape.constant(Tensor::new(vec![b, 3], batch.iter().flat_map(|s| s.gamma.as_slice().to_vec()).collect())?);
    let gt_b = tape.constant(Tensor::new(vec![b, NUM_BETAS], batch.iter().flat_map(|s| s.beta).collect())?);
    let lt = loss_beta(tape, g, gt_g)?;
    let lb = loss_beta(tape, beta, gt_b)?;
    let total = tape.add(lt, lb)?;
    let report = LossReport {
        total: tape.value(total).item(),
        translation: tape.value(lt).item(),
        beta: tape.value(lb).item(),
        ..Default::default()
    };
    if !report.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: if report.translation.is_finite() { "beta" } else { "translation" },
        });
    }
    Ok((total, report))
}

fn accumulate(acc: &mut LossReport, r: &LossReport, w: f64) {
    acc.total += w * r.total;
    acc.translation += w * r.translation;
    acc.simple += w * r.simple;
    acc.three_d += w * r.three_d;
    acc.two_d += w * r.two_d;
    acc.beta += w * r.beta;
    acc.coll += w * r.coll;
    acc.orth += w * r.orth;
}

/// Mean loss over `samples` with the collision term enabled and no
/// dropout. Sample `s` always gets the step and noise keyed by its id.
pub fn evaluate_denoiser(
    d: &Denoiser,
    skel: &Skeleton,
    sched: &NoiseSchedule,
    samples: &[TrainSample],
    weights: &LossWeights,
    seed: u64,
    batch_size: usize,
) -> Result<LossReport> {
    let mut acc = LossReport::default();
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut noise = BatchNoise {
            t: Vec::new(),
            noise: Vec::new(),
            dropped: vec![false; chunk.len()],
        };
        for s in chunk {
            let mut r = rng::stream(seed, rng::STREAM_VALIDATION, s.id, 0);
            noise.t.push(r.random_range(1..=sched.steps));
            noise.noise.push(normals(&mut r, POSE_LEN));
        }
        let batch: Vec<&TrainSample> = chunk.iter().collect();
        let mut tape = Tape::new();
        let vars = d.params.bind(&mut tape, false);
        let (_, r) = denoiser_batch_loss(d, &mut tape, &vars, skel, sched, &batch, &noise, weights, usize::MAX)?;
        accumulate(&mut acc, &r, chunk.len() as f64 / samples.len() as f64);
    }
    Ok(acc)
}

/// Mean rotation loss over every sample at each of the steps `ts`.
pub fn simple_loss_on_grid(
    d: &Denoiser,
    skel: &Skeleton,
    sched: &NoiseSchedule,
    samples: &[TrainSample],
    ts: &[usize],
    seed: u64,
) -> Result<f64> {
    let mut sum = 0.0;
    for &t in ts {
        let noise = BatchNoise {
            t: vec![t; samples.len()],
            noise: samples
                .iter()
                .map(|s| normals(&mut rng::stream(seed, rng::STREAM_VALIDATION, s.id, t as u64), POSE_LEN))
                .collect(),
            dropped: vec![false; samples.len()],
        };
        let batch: Vec<&TrainSample> = samples.iter().collect();
        let mut tape = Tape::new();
        let vars = d.params.bind(&mut tape, false);
        let (_, r) = denoiser_batch_loss(d, &mut tape, &vars, skel, sched, &batch, &noise, &LossWeights::default(), 0)?;
        sum += r.simple;
    }
    Ok(sum / ts.len() as f64)
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub heads: Heads,
    pub denoiser: Denoiser,
    pub heads_best_val: f64,
    pub denoiser_best_val: f64,
}

struct MetricsLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsLog {
    fn open(path: PathBuf, append: bool) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok(Self {
            out: BufWriter::new(f),
            path,
        })
    }

    fn row(&mut self, v: serde_json::Value) -> Result<()> {
        writeln!(self.out, "{v}").map_err(io_err(&self.path))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

trait StageModel {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn meta(&self) -> serde_json::Value;
    /// Non-trainable tensors saved alongside the parameters.
    fn extra_tensors(&self) -> Vec<(String, Tensor)> {
        Vec::new()
    }
    fn train_loss(&self, tape: &mut Tape, vars: &[Var], batch: &[&TrainSample], epoch: usize, step: usize)
        -> Result<(Var, LossReport)>;
    fn val_loss(&self, samples: &[TrainSample]) -> Result<LossReport>;
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    sched: NoiseSchedule,
}

struct HeadsStage<'a> {
    h: Heads,
    ctx: &'a Ctx<'a>,
}

impl StageModel for HeadsStage<'_> {
    fn store(&self) -> &ParamStore {
        &self.h.params
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.h.params
    }
    fn meta(&self) -> serde_json::Value {
        json!({ "config": self.h.config })
    }
    fn train_loss(&self, tape: &mut Tape, vars: &[Var], batch: &[&TrainSample], _: usize, _: usize) -> Result<(Var, LossReport)> {
        heads_batch_loss(&self.h, tape, vars, batch)
    }
    fn val_loss(&self, samples: &[TrainSample]) -> Result<LossReport> {
        let mut acc = LossReport::default();
        for chunk in samples.chunks(self.ctx.cfg.train.batch_size) {
            let batch: Vec<&TrainSample> = chunk.iter().collect();
            let mut tape = Tape::new();
            let vars = self.h.params.bind(&mut tape, false);
            let (_, r) = heads_batch_loss(&self.h, &mut tape, &vars, &batch)?;
            accumulate(&mut acc, &r, chunk.len() as f64 / samples.len() as f64);
        }
        Ok(acc)
    }
}

struct DenoiserStage<'a> {
    d: Denoiser,
    ctx: &'a Ctx<'a>,
}

impl StageModel for DenoiserStage<'_> {
    fn store(&self) -> &ParamStore {
        &self.d.params
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.d.params
    }
    fn meta(&self) -> serde_json::Value {
        json!({ "config": self.d.config, "steps": self.d.steps })
    }
    fn extra_tensors(&self) -> Vec<(String, Tensor)> {
        let (m, s) = self.d.norm.tensors();
        vec![("norm.mean".into(), m), ("norm.std".into(), s)]
    }
    fn train_loss(&self, tape: &mut Tape, vars: &[Var], batch: &[&TrainSample], epoch: usize, step: usize) -> Result<(Var, LossReport)> {
        let cfg = self.ctx.cfg;
        let mut r = rng::stream(cfg.seed, rng::STREAM_NOISE, epoch as u64, step as u64);
        let noise = BatchNoise::draw(&mut r, batch.len(), self.ctx.sched.steps, cfg.train.cond_dropout);
        denoiser_batch_loss(&self.d, tape, vars, &cfg.skeleton, &self.ctx.sched, batch, &noise, &cfg.train.weights, epoch)
    }
    fn val_loss(&self, samples: &[TrainSample]) -> Result<LossReport> {
        let cfg = self.ctx.cfg;
        evaluate_denoiser(
            &self.d,
            &cfg.skeleton,
            &self.ctx.sched,
            samples,
            &cfg.train.weights,
            cfg.seed,
            cfg.train.batch_size,
        )
    }
}

fn finite_or_null(x: f64) -> serde_json::Value {
    if x.is_finite() {
        json!(x)
    } else {
        serde_json::Value::Null
    }
}

fn stage_checkpoint<S: StageModel>(s: &S, stage: Stage, adam: &Adam, epochs_done: usize, best: f64) -> Result<Checkpoint> {
    let mut tensors = store_tensors("param.", s.store());
    for (name, (m, v)) in s.store().names().iter().zip(adam.first_moments().iter().zip(adam.second_moments())) {
        tensors.push((format!("adam.m.{name}"), Tensor::new(vec![m.len()], m.clone())?));
        tensors.push((format!("adam.v.{name}"), Tensor::new(vec![v.len()], v.clone())?));
    }
    tensors.extend(s.extra_tensors());
    Ok(Checkpoint {
        meta: json!({
            "stage": stage.name(),
            "epochs_done": epochs_done,
            "best_val": finite_or_null(best),
            "adam_step": adam.step_count(),
            "model": s.meta(),
        }),
        tensors,
    })
}

fn meta_field<'a>(ckpt: &'a Checkpoint, key: &str) -> Result<&'a serde_json::Value> {
    ckpt.meta
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{key}`")))
}

fn expect_stage(ckpt: &Checkpoint, stage: Stage) -> Result<()> {
    let got = meta_field(ckpt, "stage")?.as_str().unwrap_or_default();
    if got != stage.name() {
        return Err(Error::Checkpoint(format!("expected a {} checkpoint, found `{got}`", stage.name())));
    }
    Ok(())
}

fn model_config(ckpt: &Checkpoint) -> Result<ModelConfig> {
    let model = meta_field(ckpt, "model")?;
    serde_json::from_value(model.get("config").cloned().unwrap_or_default()).map_err(|e| Error::Json {
        context: "checkpoint model config".into(),
        source: e,
    })
}

/// Restores parameters, optimizer state, completed epochs and best score.
fn resume_state<S: StageModel>(s: &mut S, stage: Stage, ckpt: &Checkpoint, adam_cfg: AdamConfig) -> Result<(Adam, usize, f64)> {
    expect_stage(ckpt, stage)?;
    load_store(ckpt, "param.", s.store_mut())?;
    let mut m = Vec::with_capacity(s.store().len());
    let mut v = Vec::with_capacity(s.store().len());
    for (name, t) in s.store().names().iter().zip(s.store().tensors()) {
        for (prefix, out) in [("adam.m.", &mut m), ("adam.v.", &mut v)] {
            let key = format!("{prefix}{name}");
            let saved = ckpt
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor `{key}`")))?;
            if saved.len() != t.len() {
                return Err(Error::Checkpoint(format!("optimizer tensor `{key}` has the wrong size")));
            }
            out.push(saved.data().to_vec());
        }
    }
    let step = meta_field(ckpt, "adam_step")?.as_u64().unwrap_or(0);
    let epochs = meta_field(ckpt, "epochs_done")?.as_u64().unwrap_or(0) as usize;
    let best = meta_field(ckpt, "best_val")?.as_f64().unwrap_or(f64::INFINITY);
    Ok((Adam::from_state(adam_cfg, step, m, v)?, epochs, best))
}

#[allow(clippy::too_many_arguments)]
fn run_stage<S: StageModel>(
    s: &mut S,
    stage: Stage,
    epochs: usize,
    cfg: &ExperimentConfig,
    train: &[TrainSample],
    val: &[TrainSample],
    run: &Path,
    resume: bool,
    log: &mut MetricsLog,
) -> Result<f64> {
    let adam_cfg = AdamConfig {
        lr: cfg.train.lr,
        ..AdamConfig::default()
    };
    let last = checkpoint_path(run, stage, "last");
    let (mut adam, start, mut best) = if resume && last.exists() {
        resume_state(s, stage, &Checkpoint::load(&last)?, adam_cfg)?
    } else {
        (Adam::new(adam_cfg, s.store()), 0, f64::INFINITY)
    };
    let bs = cfg.train.batch_size;
    let steps_per_epoch = train.len().div_ceil(bs);
    for epoch in start..epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, rng::STREAM_TRAIN, epoch as u64, stage.index()));
        let mut mean = LossReport::default();
        for (k, chunk) in order.chunks(bs).enumerate() {
            let step = epoch * steps_per_epoch + k;
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let vars = s.store().bind(&mut tape, true);
            let (loss, report) = s.train_loss(&mut tape, &vars, &batch, epoch, k)?;
            if !(report.total <= cfg.train.divergence_threshold) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: report.total,
                });
            }
            let mut grads = tape.backward(loss)?;
            let g = s.store().collect_grads(&mut grads, &vars);
            let grad_norm = g
                .iter()
                .flatten()
                .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            adam.step(s.store_mut(), &g)?;
            accumulate(&mut mean, &report, chunk.len() as f64 / train.len() as f64);
            log.row(json!({
                "stage": stage.name(), "epoch": epoch, "step": step,
                "loss": report, "grad_norm": grad_norm,
            }))?;
        }
        let val_report = if val.is_empty() { None } else { Some(s.val_loss(val)?) };
        let score = val_report.map_or(mean.total, |r| r.total);
        log.row(json!({ "stage": stage.name(), "epoch": epoch, "train_mean": mean, "val": val_report }))?;
        log.flush()?;
        log::info!(
            "{} epoch {}/{}: train {:.6} val {:.6}",
            stage.name(),
            epoch + 1,
            epochs,
            mean.total,
            score
        );
        if score < best {
            best = score;
            stage_checkpoint(s, stage, &adam, epoch + 1, best)?.save(&checkpoint_path(run, stage, "best"))?;
        }
        stage_checkpoint(s, stage, &adam, epoch + 1, best)?.save(&last)?;
    }
    if !checkpoint_path(run, stage, "best").exists() {
        // zero-epoch runs still leave a loadable model behind
        stage_checkpoint(s, stage, &adam, start, best)?.save(&checkpoint_path(run, stage, "best"))?;
    }
    Ok(best)
}

/// Trains the heads, then the denoiser, on the dataset in
/// `cfg.dataset_dir`, writing checkpoints, the metrics log and the resolved
/// config into `run`. With `resume`, each stage continues from its last
/// checkpoint when one exists.
pub fn train(cfg: &ExperimentConfig, run: &Path, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(run).map_err(io_err(run))?;
    cfg.save(&run.join("config.toml"))?;
    let mut train_recs = read_split(&cfg.dataset_dir, Split::Train)?;
    if let Some(limit) = cfg.train.train_limit {
        train_recs.truncate(limit);
    }
    if train_recs.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let mut val_recs = if cfg.train.validate_on_train {
        train_recs.clone()
    } else {
        read_split(&cfg.dataset_dir, Split::Val)?
    };
    val_recs.truncate(cfg.train.val_limit);

    let map = ShapeMap::from_skeleton(&cfg.skeleton);
    let cache = SceneCache::new();
    let train_set = prepare_samples(&train_recs, &cfg.model, &cfg.skeleton, &map, &cache, cfg.execution)?;
    let val_set = prepare_samples(&val_recs, &cfg.model, &cfg.skeleton, &map, &cache, cfg.execution)?;
    log::info!("training on {} samples, validating on {}", train_set.len(), val_set.len());

    let ctx = Ctx {
        cfg,
        sched: NoiseSchedule::new(&cfg.schedule)?,
    };
    let mut log = MetricsLog::open(run.join(METRICS_FILE), resume)?;
    let mut h = Heads::new(&cfg.model, cfg.seed);
    // start from the mean training target rather than from zero
    let inv = 1.0 / train_set.len() as f64;
    let mean_gamma = train_set.iter().map(|s| s.gamma).sum::<Vector3<f64>>() * inv;
    let mut mean_beta = [0.0; NUM_BETAS];
    for s in &train_set {
        for (m, b) in mean_beta.iter_mut().zip(&s.beta) {
            *m += b * inv;
        }
    }
    h.set_output_bias(&mean_gamma, &mean_beta);
    let mut heads = HeadsStage { h, ctx: &ctx };
    let heads_best_val = run_stage(&mut heads, Stage::Heads, cfg.train.head_epochs, cfg, &train_set, &val_set, run, resume, &mut log)?;
    let mut d = Denoiser::new(&cfg.model, &cfg.skeleton, cfg.schedule.steps, cfg.seed);
    d.norm = PoseNorm::fit(train_set.iter().map(|s| s.theta.as_slice()))?;
    let mut den = DenoiserStage { d, ctx: &ctx };
    let denoiser_best_val = run_stage(&mut den, Stage::Denoiser, cfg.train.epochs, cfg, &train_set, &val_set, run, resume, &mut log)?;
    Ok(TrainOutcome {
        heads: heads.h,
        denoiser: den.d,
        heads_best_val,
        denoiser_best_val,
    })
}

pub fn load_denoiser(path: &Path, skel: &Skeleton) -> Result<Denoiser> {
    let ckpt = Checkpoint::load(path)?;
    expect_stage(&ckpt, Stage::Denoiser)?;
    let config = model_config(&ckpt)?;
    let steps = meta_field(&ckpt, "model")?
        .get("steps")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Checkpoint("metadata lacks the step count".into()))? as usize;
    let mut d = Denoiser::new(&config, skel, steps, 0);
    load_store(&ckpt, "param.", &mut d.params)?;
    let norm = |k: &str| ckpt.get(k).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{k}`")));
    d.norm = PoseNorm::from_tensors(norm("norm.mean")?, norm("norm.std")?)?;
    Ok(d)
}

pub fn load_heads(path: &Path) -> Result<Heads> {
    let ckpt = Checkpoint::load(path)?;
    expect_stage(&ckpt, Stage::Heads)?;
    let mut h = Heads::new(&model_config(&ckpt)?, 0);
    load_store(&ckpt, "param.", &mut h.params)?;
    Ok(h)
}
